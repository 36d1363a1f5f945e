//! Failure rate and k-nearest-neighbour density / coverage of generated
//! failure trajectories against reference failures.
//!
//! Distances are Euclidean, summed in coordinate order and square-rooted, so
//! the k-d tree path returns exactly what a double loop returns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::SimulationResult;

/// Relative positions at the 24 recorded steps, flattened time-major.
pub const FEATURE_DIM: usize = 48;

pub type Feature = [f64; FEATURE_DIM];

pub fn failure_rate(rhos: &[f64]) -> Result<f64> {
    if rhos.is_empty() {
        return Err(Error::Empty("no simulations to rate".into()));
    }
    Ok(rhos.iter().filter(|r| **r == 0.0).count() as f64 / rhos.len() as f64)
}

pub fn embed(result: &SimulationResult) -> Result<Feature> {
    let rel = result.relative_positions();
    if rel.len() != FEATURE_DIM / 2 {
        return Err(Error::Shape(format!(
            "trajectory has {} records, expected {}",
            rel.len(),
            FEATURE_DIM / 2
        )));
    }
    let mut f = [0.0; FEATURE_DIM];
    for (t, p) in rel.iter().enumerate() {
        f[2 * t] = p[0];
        f[2 * t + 1] = p[1];
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("trajectory feature is not finite".into()));
    }
    Ok(f)
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s.sqrt()
}

/// Lower bound on the distance from `q` to any point inside the box.
fn box_distance(q: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    let mut s = 0.0;
    for ((x, l), h) in q.iter().zip(lo).zip(hi) {
        let d = if x < l {
            l - x
        } else if x > h {
            x - h
        } else {
            0.0
        };
        s += d * d;
    }
    s.sqrt()
}

const LEAF_SIZE: usize = 8;

struct Node {
    lo: Vec<f64>,
    hi: Vec<f64>,
    start: usize,
    end: usize,
    children: Option<(usize, usize)>,
    /// Largest ball radius among the node's points.
    max_radius: f64,
}

/// Static k-d tree over a point set.
pub struct KdTree<'a> {
    points: &'a [Vec<f64>],
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Vec<f64>]) -> Self {
        let mut tree = Self {
            points,
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let dim = self.points[self.order[start]].len();
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for &i in &self.order[start..end] {
            for (d, &x) in self.points[i].iter().enumerate() {
                lo[d] = lo[d].min(x);
                hi[d] = hi[d].max(x);
            }
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            lo,
            hi,
            start,
            end,
            children: None,
            max_radius: 0.0,
        });
        if end - start > LEAF_SIZE {
            let node = &self.nodes[id];
            let axis = (0..dim)
                .max_by(|&a, &b| (node.hi[a] - node.lo[a]).total_cmp(&(node.hi[b] - node.lo[b])))
                .expect("non-empty dimension");
            let mid = start + (end - start) / 2;
            let pts = self.points;
            self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
            let left = self.build(start, mid);
            let right = self.build(mid, end);
            self.nodes[id].children = Some((left, right));
        }
        id
    }

    /// Distance from point `i` of the set to its `k`-th nearest other point.
    fn kth_neighbor(&self, i: usize, k: usize) -> f64 {
        // sorted ascending, at most k entries
        let mut best: Vec<f64> = Vec::with_capacity(k + 1);
        let q = &self.points[i];
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if best.len() == k && box_distance(q, &node.lo, &node.hi) > best[k - 1] {
                continue;
            }
            match node.children {
                Some((l, r)) => {
                    stack.push(r);
                    stack.push(l);
                }
                None => {
                    for &j in &self.order[node.start..node.end] {
                        if j == i {
                            continue;
                        }
                        let d = distance(q, &self.points[j]);
                        if best.len() < k || d < best[k - 1] {
                            let pos = best.partition_point(|&b| b <= d);
                            best.insert(pos, d);
                            best.truncate(k);
                        }
                    }
                }
            }
        }
        best[k - 1]
    }

    fn set_radii(&mut self, radii: &[f64]) {
        for id in (0..self.nodes.len()).rev() {
            let node = &self.nodes[id];
            let r = match node.children {
                Some((l, r)) => self.nodes[l].max_radius.max(self.nodes[r].max_radius),
                None => self.order[node.start..node.end]
                    .iter()
                    .map(|&j| radii[j])
                    .fold(0.0, f64::max),
            };
            self.nodes[id].max_radius = r;
        }
    }

    /// Calls `hit(j)` for every point `j` whose ball contains `q`.
    fn for_each_ball_containing(&self, q: &[f64], radii: &[f64], mut hit: impl FnMut(usize)) {
        if self.nodes.is_empty() {
            return;
        }
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if box_distance(q, &node.lo, &node.hi) > node.max_radius {
                continue;
            }
            match node.children {
                Some((l, r)) => {
                    stack.push(r);
                    stack.push(l);
                }
                None => {
                    for &j in &self.order[node.start..node.end] {
                        if distance(q, &self.points[j]) <= radii[j] {
                            hit(j);
                        }
                    }
                }
            }
        }
    }
}

fn check_k(n_real: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if n_real <= k {
        return Err(Error::Empty(format!("need more than k = {k} reference points, got {n_real}")));
    }
    Ok(())
}

/// Distance from each reference point to its `k`-th nearest other reference point.
pub fn knn_radii(real: &[Vec<f64>], k: usize) -> Result<Vec<f64>> {
    check_k(real.len(), k)?;
    let tree = KdTree::new(real);
    Ok((0..real.len()).map(|i| tree.kth_neighbor(i, k)).collect())
}

/// Per reference point, how many generated points fall inside its ball.
fn ball_hits(generated: &[Vec<f64>], real: &[Vec<f64>], k: usize) -> Result<Vec<usize>> {
    let radii = knn_radii(real, k)?;
    let mut tree = KdTree::new(real);
    tree.set_radii(&radii);
    let mut hits = vec![0usize; real.len()];
    for g in generated {
        tree.for_each_ball_containing(g, &radii, |j| hits[j] += 1);
    }
    Ok(hits)
}

fn check_generated(generated: &[Vec<f64>]) -> Result<()> {
    if generated.is_empty() {
        return Err(Error::Empty("no generated points".into()));
    }
    Ok(())
}

/// `(1 / (k |gen|)) * #{(g, r) : d(g, r) <= radius(r)}`.
pub fn density(generated: &[Vec<f64>], real: &[Vec<f64>], k: usize) -> Result<f64> {
    check_generated(generated)?;
    let hits = ball_hits(generated, real, k)?;
    Ok(hits.iter().sum::<usize>() as f64 / (k as f64 * generated.len() as f64))
}

/// Fraction of reference balls containing at least one generated point.
pub fn coverage(generated: &[Vec<f64>], real: &[Vec<f64>], k: usize) -> Result<f64> {
    check_generated(generated)?;
    let hits = ball_hits(generated, real, k)?;
    Ok(hits.iter().filter(|h| **h > 0).count() as f64 / real.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub failure_rate: f64,
    pub density: f64,
    pub coverage: f64,
    pub k: usize,
    pub generated_total: usize,
    pub generated_failures: usize,
    pub real_failures: usize,
}

impl FidelityReport {
    /// `generated_rhos` covers every generated sample; the feature lists hold
    /// failures only.
    pub fn compute(generated_rhos: &[f64], generated: &[Vec<f64>], real: &[Vec<f64>], k: usize) -> Result<Self> {
        let rate = failure_rate(generated_rhos)?;
        let (density, coverage) = if generated.is_empty() {
            check_k(real.len(), k)?;
            (0.0, 0.0)
        } else {
            let hits = ball_hits(generated, real, k)?;
            (
                hits.iter().sum::<usize>() as f64 / (k as f64 * generated.len() as f64),
                hits.iter().filter(|h| **h > 0).count() as f64 / real.len() as f64,
            )
        };
        Ok(Self {
            failure_rate: rate,
            density,
            coverage,
            k,
            generated_total: generated_rhos.len(),
            generated_failures: generated.len(),
            real_failures: real.len(),
        })
    }

    pub fn table(&self) -> String {
        let rows = [
            ("failure rate", format!("{:.4}", self.failure_rate)),
            ("density", format!("{:.4}", self.density)),
            ("coverage", format!("{:.4}", self.coverage)),
            ("k", self.k.to_string()),
            ("generated samples", self.generated_total.to_string()),
            ("generated failures", self.generated_failures.to_string()),
            ("reference failures", self.real_failures.to_string()),
        ];
        let w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
        rows.iter().map(|(n, v)| format!("{n:<w$}  {v:>10}\n")).collect()
    }
}
