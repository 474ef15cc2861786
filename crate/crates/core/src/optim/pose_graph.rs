use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, SMatrix};

use super::lm::{damp, run_lm, LmConfig, LmProblem, LmSummary};
use super::OptimError;
use crate::geometry::{Sim3, Vector7};

/// Constraint `S_i · S_j⁻¹ ≈ measurement` between two world-to-camera similarities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseGraphEdge {
    pub i: usize,
    pub j: usize,
    pub measurement: Sim3,
    pub weight: f64,
}

impl PoseGraphEdge {
    /// Edge that reproduces the current relative transform of `si` and `sj`.
    pub fn from_poses(i: usize, j: usize, si: &Sim3, sj: &Sim3, weight: f64) -> Self {
        Self { i, j, measurement: *si * sj.inverse(), weight }
    }

    pub fn residual(&self, si: &Sim3, sj: &Sim3) -> Vector7 {
        (self.measurement * *sj * si.inverse()).log()
    }
}

#[derive(Clone, Debug)]
pub struct PoseGraphSummary {
    pub poses: Vec<Sim3>,
    pub lm: LmSummary,
}

struct Graph<'a> {
    poses: Vec<Sim3>,
    edges: &'a [PoseGraphEdge],
    block: Vec<Option<usize>>,
    h: DMatrix<f64>,
    b: DVector<f64>,
}

const FD_STEP: f64 = 1e-6;

impl Graph<'_> {
    fn edge_jacobians(&self, e: &PoseGraphEdge) -> (SMatrix<f64, 7, 7>, SMatrix<f64, 7, 7>) {
        let (si, sj) = (self.poses[e.i], self.poses[e.j]);
        let mut ji = SMatrix::<f64, 7, 7>::zeros();
        let mut jj = SMatrix::<f64, 7, 7>::zeros();
        for k in 0..7 {
            let mut d = Vector7::zeros();
            d[k] = FD_STEP;
            let col_i = (e.residual(&si.retract(&d), &sj) - e.residual(&si.retract(&(-d)), &sj)) / (2.0 * FD_STEP);
            let col_j = (e.residual(&si, &sj.retract(&d)) - e.residual(&si, &sj.retract(&(-d)))) / (2.0 * FD_STEP);
            ji.set_column(k, &col_i);
            jj.set_column(k, &col_j);
        }
        (ji, jj)
    }
}

impl LmProblem for Graph<'_> {
    type Snapshot = Vec<Sim3>;

    fn cost(&self) -> f64 {
        self.edges
            .iter()
            .map(|e| e.weight * e.residual(&self.poses[e.i], &self.poses[e.j]).norm_squared())
            .sum()
    }

    fn linearize(&mut self) -> f64 {
        self.h.fill(0.0);
        self.b.fill(0.0);
        for e in self.edges {
            let r = e.residual(&self.poses[e.i], &self.poses[e.j]);
            let (ji, jj) = self.edge_jacobians(e);
            let blocks = [(self.block[e.i], ji), (self.block[e.j], jj)];
            for (ba, ja) in &blocks {
                let Some(a) = ba else { continue };
                let mut g = self.b.fixed_rows_mut::<7>(7 * a);
                g -= ja.transpose() * r * e.weight;
                for (bb, jb) in &blocks {
                    let Some(b) = bb else { continue };
                    let mut blk = self.h.fixed_view_mut::<7, 7>(7 * a, 7 * b);
                    blk += ja.transpose() * jb * e.weight;
                }
            }
        }
        self.b.amax()
    }

    fn solve(&self, lambda: f64) -> Option<DVector<f64>> {
        let mut h = self.h.clone();
        damp(&mut h, lambda);
        let x = h.cholesky()?.solve(&self.b);
        x.iter().all(|v| v.is_finite()).then_some(x)
    }

    fn apply(&mut self, step: &DVector<f64>) {
        for (k, b) in self.block.iter().enumerate() {
            if let Some(i) = b {
                let d: Vector7 = step.fixed_rows::<7>(7 * i).into();
                self.poses[k] = self.poses[k].retract(&d);
            }
        }
    }

    fn snapshot(&self) -> Vec<Sim3> {
        self.poses.clone()
    }

    fn restore(&mut self, snap: Vec<Sim3>) {
        self.poses = snap;
    }
}

/// Minimizes Σ w‖log(S_ij · S_j · S_i⁻¹)‖² over the free vertices.
pub fn optimize_pose_graph(
    poses: &[Sim3],
    edges: &[PoseGraphEdge],
    fixed: &[bool],
    cfg: &LmConfig,
) -> Result<PoseGraphSummary, OptimError> {
    if fixed.len() != poses.len() {
        return Err(OptimError::InvalidProblem("fixed mask length differs from vertex count".into()));
    }
    if let Some(e) = edges.iter().find(|e| e.i >= poses.len() || e.j >= poses.len() || e.i == e.j) {
        return Err(OptimError::InvalidProblem(format!("bad edge {}–{}", e.i, e.j)));
    }
    check_connected(poses.len(), edges, fixed)?;
    let mut next = 0;
    let block: Vec<Option<usize>> = fixed
        .iter()
        .map(|&f| {
            (!f).then(|| {
                next += 1;
                next - 1
            })
        })
        .collect();
    let mut g = Graph {
        poses: poses.to_vec(),
        edges,
        block,
        h: DMatrix::zeros(7 * next, 7 * next),
        b: DVector::zeros(7 * next),
    };
    let lm = run_lm(&mut g, cfg)?;
    Ok(PoseGraphSummary { poses: g.poses, lm })
}

fn check_connected(n: usize, edges: &[PoseGraphEdge], fixed: &[bool]) -> Result<(), OptimError> {
    if n == 0 {
        return Ok(());
    }
    let mut adj = vec![Vec::new(); n];
    for e in edges {
        adj[e.i].push(e.j);
        adj[e.j].push(e.i);
    }
    let mut seen = fixed.to_vec();
    let mut queue: VecDeque<usize> = (0..n).filter(|&i| fixed[i]).collect();
    if queue.is_empty() {
        return Err(OptimError::InvalidProblem("no fixed vertex".into()));
    }
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                queue.push_back(w);
            }
        }
    }
    match seen.iter().position(|s| !s) {
        Some(v) => Err(OptimError::Disconnected(v)),
        None => Ok(()),
    }
}
