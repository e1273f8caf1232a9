use serde::{Deserialize, Serialize};

/// Fixed square-patch tiling of an image. Remainder strips on the right and
/// bottom that do not fill a whole patch are outside the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_px: usize,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize, patch_px: usize) -> Self {
        Self {
            rows,
            cols,
            patch_px,
        }
    }

    /// Largest grid of `patch_px` patches fitting an `height × width` image.
    pub fn for_image(height: usize, width: usize, patch_px: usize) -> Self {
        Self::new(height / patch_px, width / patch_px, patch_px)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Patch containing continuous pixel coordinate `(u, v)` (column, row).
    pub fn patch_of_pixel(&self, u: f64, v: f64) -> Option<usize> {
        if !(u >= 0.0 && v >= 0.0) {
            return None;
        }
        let c = (u / self.patch_px as f64).floor() as usize;
        let r = (v / self.patch_px as f64).floor() as usize;
        (r < self.rows && c < self.cols).then(|| r * self.cols + c)
    }

    /// `(row, col)` of patch `p`.
    pub fn cell(&self, p: usize) -> (usize, usize) {
        (p / self.cols, p % self.cols)
    }

    /// Integer pixel `(u, v)` chosen to represent patch `p`.
    pub fn center_pixel(&self, p: usize) -> (usize, usize) {
        let (r, c) = self.cell(p);
        let half = self.patch_px / 2;
        (c * self.patch_px + half, r * self.patch_px + half)
    }

    /// Continuous coordinate of the representative pixel's center.
    pub fn center(&self, p: usize) -> (f64, f64) {
        let (u, v) = self.center_pixel(p);
        (u as f64 + 0.5, v as f64 + 0.5)
    }
}
