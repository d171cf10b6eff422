use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned pixel box: `(x, y)` is the top-left corner, `(w, h)` the size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        BBox { x, y, w, h }
    }

    /// Builds a box and checks it has positive extent and lies inside a
    /// `size`×`size` image.
    pub fn checked(x: u32, y: u32, w: u32, h: u32, size: u32) -> Result<Self> {
        let b = BBox { x, y, w, h };
        if w == 0 || h == 0 || x >= size || y >= size || x + w > size || y + h > size {
            return Err(Error::BoxRange(b.to_array(), size));
        }
        Ok(b)
    }

    pub fn to_array(self) -> [u32; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.x as f64 + self.w as f64 / 2.0,
            self.y as f64 + self.h as f64 / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w as f64 * self.h as f64
    }

    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }
}

impl From<[u32; 4]> for BBox {
    fn from(a: [u32; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}
