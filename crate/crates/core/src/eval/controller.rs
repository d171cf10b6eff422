use rand::Rng;

use crate::action::Action;
use crate::annotate::oracle_action;
use crate::error::Error;
use crate::format::{Instruction, TokenSequence};
use crate::policy::{featurize, greedy, PolicyParams};
use crate::seed;
use crate::sim::{apply_action, focus_distance, Frame, KinematicsConfig, MotorState, Scene};

/// What a controller sees at one step.
pub struct Observation<'a> {
    pub scene: &'a Scene,
    /// The target the episode is currently heading for.
    pub target_index: usize,
    pub theta: MotorState,
    pub step: usize,
    /// Rendered frame; present iff the controller asked for frames.
    pub frame: Option<&'a Frame>,
    pub kin: &'a KinematicsConfig,
}

/// A controller's output for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    /// `None` when the raw output could not be parsed (no actuation).
    pub action: Option<Action>,
    /// Raw output of token-emitting controllers.
    pub output: Option<RawOutput>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawOutput {
    pub tokens: TokenSequence,
    pub instruction: Instruction,
}

impl Decision {
    pub fn act(action: Action) -> Self {
        Decision { action: Some(action), output: None }
    }
}

/// Closed-loop decision maker. Controllers are stateless so trials can run
/// in parallel against one shared instance.
pub trait Controller: Sync {
    fn name(&self) -> String;

    /// Whether [`Observation::frame`] must be rendered.
    fn needs_frame(&self) -> bool {
        false
    }

    fn decide(&self, obs: &Observation<'_>) -> Decision;
}

/// Ground-truth greedy controller.
///
/// Uses the labeling oracle; when no candidate keeps the target in frame it
/// falls back to minimizing the (off-frame) focus distance directly.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleController;

impl Controller for OracleController {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn decide(&self, obs: &Observation<'_>) -> Decision {
        match oracle_action(obs.scene, obs.target_index, obs.theta, obs.kin) {
            Ok(a) => Decision::act(a),
            Err(Error::NoProgress) => {
                let mut best: Option<(f64, Action)> = None;
                for a in Action::MOVES {
                    let next = apply_action(obs.theta, a, obs.kin).state;
                    if let Ok(Some(d)) = focus_distance(obs.scene, obs.target_index, next, obs.kin) {
                        if best.is_none_or(|(b, _)| d < b) {
                            best = Some((d, a));
                        }
                    }
                }
                Decision::act(best.map_or(Action::Stop, |(_, a)| a))
            }
            Err(_) => Decision::act(Action::Stop),
        }
    }
}

/// Issues STOP at every step.
#[derive(Debug, Clone, Copy, Default)]
pub struct AlwaysStop;

impl Controller for AlwaysStop {
    fn name(&self) -> String {
        "always-stop".into()
    }

    fn decide(&self, _: &Observation<'_>) -> Decision {
        Decision::act(Action::Stop)
    }
}

/// Uniformly random motion (never STOP), seeded per scene and step.
#[derive(Debug, Clone, Copy)]
pub struct RandomController {
    pub seed: u64,
}

impl Controller for RandomController {
    fn name(&self) -> String {
        "random".into()
    }

    fn decide(&self, obs: &Observation<'_>) -> Decision {
        let s = seed::derive(seed::derive(self.seed, obs.scene.seed), obs.step as u64);
        Decision::act(Action::MOVES[seed::rng(s).random_range(0..4)])
    }
}

/// Greedy decoding of a trained token policy.
#[derive(Debug, Clone)]
pub struct PolicyController {
    pub params: PolicyParams,
    pub instruction: Instruction,
}

impl Controller for PolicyController {
    fn name(&self) -> String {
        format!("policy-{}", self.instruction.code())
    }

    fn needs_frame(&self) -> bool {
        true
    }

    fn decide(&self, obs: &Observation<'_>) -> Decision {
        let frame = obs.frame.expect("policy controller needs frames");
        let features = featurize(frame, obs.scene.task, self.instruction, self.params.config().grid);
        let out = greedy(&self.params, &features).tokens;
        let action = crate::format::parse(&out, self.instruction, obs.kin.image_size)
            .ok()
            .map(|p| p.action);
        Decision {
            action,
            output: Some(RawOutput {
                tokens: out,
                instruction: self.instruction,
            }),
        }
    }
}
