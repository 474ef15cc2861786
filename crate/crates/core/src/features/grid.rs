use super::Keypoint;
use crate::geometry::Pixel;

/// Bucketed keypoint positions for radius queries.
#[derive(Clone, Debug)]
pub struct KeypointGrid {
    cell: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<usize>>,
    points: Vec<Pixel>,
}

impl KeypointGrid {
    pub fn new(keypoints: &[Keypoint], width: u32, height: u32, cell: f64) -> Self {
        let cols = ((width as f64 / cell).ceil() as usize).max(1);
        let rows = ((height as f64 / cell).ceil() as usize).max(1);
        let mut g = Self { cell, cols, rows, buckets: vec![Vec::new(); cols * rows], points: Vec::with_capacity(keypoints.len()) };
        for (i, k) in keypoints.iter().enumerate() {
            let (c, r) = g.cell_of(k.x, k.y);
            g.buckets[r * cols + c].push(i);
            g.points.push(k.pixel());
        }
        g
    }

    fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let c = (x / self.cell).floor().clamp(0.0, (self.cols - 1) as f64) as usize;
        let r = (y / self.cell).floor().clamp(0.0, (self.rows - 1) as f64) as usize;
        (c, r)
    }

    /// Indices of keypoints within `radius` of `p`, ascending.
    pub fn within(&self, p: &Pixel, radius: f64) -> Vec<usize> {
        let (c0, r0) = self.cell_of(p.x - radius, p.y - radius);
        let (c1, r1) = self.cell_of(p.x + radius, p.y + radius);
        let mut out = Vec::new();
        for r in r0..=r1 {
            for c in c0..=c1 {
                out.extend(self.buckets[r * self.cols + c].iter().copied().filter(|&i| (self.points[i] - p).norm() <= radius));
            }
        }
        out.sort_unstable();
        out
    }
}
