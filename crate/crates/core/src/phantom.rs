//! Synthetic test images used in place of the photographs of the original
//! experiments. All are deterministic functions of their size.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phantom {
    /// Flat regions: rectangles, a disk and a triangle on a dark background.
    Shapes,
    /// Running-bond brick wall with thin mortar lines.
    Bricks,
    /// Tiled mosaic of flat cells with alternating gray levels.
    Mosaic,
}

impl Phantom {
    pub const ALL: [Phantom; 3] = [Phantom::Shapes, Phantom::Bricks, Phantom::Mosaic];

    pub fn name(self) -> &'static str {
        match self {
            Phantom::Shapes => "shapes",
            Phantom::Bricks => "bricks",
            Phantom::Mosaic => "mosaic",
        }
    }

    pub fn render(self, size: usize) -> Result<ImageGrid> {
        if size < 16 {
            return Err(Error::domain(format!(
                "phantom size must be >= 16, got {size}"
            )));
        }
        let s = size as f64;
        match self {
            Phantom::Shapes => ImageGrid::from_fn(size, size, 1.0, |i, j| {
                let (x, y) = ((i as f64 + 0.5) / s, (j as f64 + 0.5) / s);
                if (x - 0.68).powi(2) + (y - 0.32).powi(2) < 0.18f64.powi(2) {
                    200.0
                } else if (0.12..0.45).contains(&x) && (0.15..0.55).contains(&y) {
                    150.0
                } else if y > 0.6 && y < 0.92 && (x - 0.55).abs() < (y - 0.6) * 0.9 {
                    100.0
                } else if (0.08..0.3).contains(&x) && (0.68..0.9).contains(&y) {
                    230.0
                } else {
                    50.0
                }
            }),
            Phantom::Bricks => {
                let brick_h = (size / 10).max(4);
                let brick_w = 2 * brick_h;
                ImageGrid::from_fn(size, size, 1.0, |i, j| {
                    let course = j / brick_h;
                    let offset = if course.is_multiple_of(2) {
                        0
                    } else {
                        brick_w / 2
                    };
                    let col = (i + offset) / brick_w;
                    let mortar = j % brick_h == 0 || (i + offset) % brick_w == 0;
                    if mortar {
                        200.0
                    } else {
                        // Three brick shades picked from the brick's coordinates.
                        [90.0, 120.0, 150.0][(course * 7 + col * 3) % 3]
                    }
                })
            }
            Phantom::Mosaic => {
                let cell = (size / 8).max(2);
                ImageGrid::from_fn(size, size, 1.0, |i, j| {
                    let (ci, cj) = (i / cell, j / cell);
                    [40.0, 100.0, 160.0, 220.0][(ci * 3 + cj * 5) % 4]
                })
            }
        }
    }
}

impl fmt::Display for Phantom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phantom {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phantom::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(vec![format!("unknown phantom '{s}'")]))
    }
}
