use std::fmt;

use serde::{Deserialize, Serialize};

/// Discrete bending command.
///
/// Each non-stop variant maps to a motor increment direction `(s1, s2)`:
/// the step applied to the motors is `(s1 * delta_theta, s2 * delta_theta)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    UpperRight,
    UpperLeft,
    LowerLeft,
    LowerRight,
    Stop,
}

impl Action {
    pub const ALL: [Action; 5] = [
        Action::UpperRight,
        Action::UpperLeft,
        Action::LowerLeft,
        Action::LowerRight,
        Action::Stop,
    ];

    /// The four motions, in the fixed tie-break order.
    pub const MOVES: [Action; 4] = [
        Action::UpperRight,
        Action::UpperLeft,
        Action::LowerLeft,
        Action::LowerRight,
    ];

    pub fn increment(self) -> (i8, i8) {
        match self {
            Action::UpperRight => (1, 1),
            Action::UpperLeft => (-1, 1),
            Action::LowerLeft => (-1, -1),
            Action::LowerRight => (1, -1),
            Action::Stop => (0, 0),
        }
    }

    pub fn from_increment(inc: (i8, i8)) -> Option<Action> {
        Action::ALL.into_iter().find(|a| a.increment() == inc)
    }

    /// Output character used in policy token sequences.
    pub fn symbol(self) -> char {
        match self {
            Action::UpperRight => 'a',
            Action::UpperLeft => 'b',
            Action::LowerLeft => 'c',
            Action::LowerRight => 'd',
            Action::Stop => 's',
        }
    }

    pub fn from_symbol(c: char) -> Option<Action> {
        Action::ALL.into_iter().find(|a| a.symbol() == c)
    }

    pub fn is_stop(self) -> bool {
        self == Action::Stop
    }

    /// Column heading used in annotation statistics, e.g. `[1,-1]`.
    pub fn label(self) -> String {
        let (a, b) = self.increment();
        format!("[{a},{b}]")
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Action::UpperRight => "upper-right",
            Action::UpperLeft => "upper-left",
            Action::LowerLeft => "lower-left",
            Action::LowerRight => "lower-right",
            Action::Stop => "stop",
        };
        f.write_str(name)
    }
}
