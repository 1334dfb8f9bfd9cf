//! Polar uncertainty chart: angle from circular MDS remapped into cluster
//! sectors, radius from the uncertainty score, then collision relaxation.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use super::Point;
use crate::circular::{signed_angle, Sector, SectorAllocation};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChartConfig {
    pub chart_radius: f64,
    pub r_min_fraction: f64,
    pub r_max_fraction: f64,
    pub node_radius: f64,
    pub iterations: usize,
    /// Extra clearance kept between circles, px.
    pub collision_padding: f64,
    pub radial_strength: f64,
    /// Share of each collision push applied radially even when the
    /// tangential direction is free.
    pub radial_leak: f64,
    /// Fraction of the sector span left empty on each side of the targets.
    pub sector_inset: f64,
    pub parallel: bool,
}

impl Default for ChartConfig {
    fn default() -> Self {
        Self {
            chart_radius: 300.0,
            r_min_fraction: 0.15,
            r_max_fraction: 0.95,
            node_radius: 6.0,
            iterations: 500,
            collision_padding: 0.5,
            radial_strength: 0.1,
            radial_leak: 0.05,
            sector_inset: 0.05,
            parallel: par::available(),
        }
    }
}

impl ChartConfig {
    pub fn r_min(&self) -> f64 {
        self.r_min_fraction * self.chart_radius
    }

    pub fn r_max(&self) -> f64 {
        self.r_max_fraction * self.chart_radius
    }

    /// Strictly increasing in `u` on [0, 1].
    pub fn radius_for(&self, uncertainty: f64) -> f64 {
        self.r_min() + uncertainty.clamp(0.0, 1.0) * (self.r_max() - self.r_min())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartInput {
    pub snippet_id: String,
    pub uncertainty: f64,
    /// Global angle from circular MDS.
    pub theta: f64,
    pub cluster_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartNode {
    pub snippet_id: String,
    pub cluster_id: usize,
    pub uncertainty: f64,
    pub theta_target: f64,
    pub radius_target: f64,
    pub theta: f64,
    pub radius: f64,
    pub position: Point,
    pub radius_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartSector {
    pub cluster_id: usize,
    pub sector: Sector,
    pub label: String,
    pub label_position: Point,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartLayout {
    pub chart_radius: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub nodes: Vec<ChartNode>,
    pub sectors: Vec<ChartSector>,
}

/// Input and output state of the relaxation for one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelaxNode {
    pub theta: f64,
    pub radius: f64,
    pub radius_target: f64,
    pub size: f64,
    pub sector: Sector,
}

/// Angular and radial bounds keeping a circle of `size` inside `sector` and
/// the chart.
fn clamp(node: &mut RelaxNode, chart_radius: f64) {
    let r_lo = node.size.min(chart_radius / 2.0);
    let r_hi = (chart_radius - node.size).max(r_lo);
    node.radius = node.radius.clamp(r_lo, r_hi);
    if node.sector.is_full_circle() {
        node.theta = node.theta.rem_euclid(TAU);
        return;
    }
    let half = 0.5 * node.sector.span();
    let margin = (node.size / node.radius).min(half);
    let (lo, hi) = (node.sector.start + margin, node.sector.end - margin);
    node.theta = if lo <= hi {
        node.theta.clamp(lo, hi)
    } else {
        node.sector.mid()
    };
}

/// Uniform grid over node centers for neighbour queries.
struct Grid {
    cell: f64,
    cells: BTreeMap<(i64, i64), Vec<usize>>,
}

impl Grid {
    fn new(points: &[Point], cell: f64) -> Self {
        let mut cells: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { cell, cells }
    }

    fn key(p: &Point, cell: f64) -> (i64, i64) {
        ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64)
    }

    fn near(&self, p: &Point) -> impl Iterator<Item = usize> + '_ {
        let (cx, cy) = Self::key(p, self.cell);
        (-1..=1)
            .flat_map(move |dx| (-1..=1).map(move |dy| (cx + dx, cy + dy)))
            .filter_map(|k| self.cells.get(&k))
            .flatten()
            .copied()
    }
}

/// Iterations a node may stay in collision before its pushes turn radial.
const STUCK_RAMP: f64 = 60.0;

/// Fixed-iteration polar relaxation. Collisions are resolved along the
/// tangent first, which keeps radii (the uncertainty encoding) intact. A
/// node gets radial freedom only through a small leak, when it is pinned
/// against its sector edge, or after staying in collision for a while.
/// Updates are Jacobi-style, so results do not depend on thread count.
pub fn force_relax(nodes: &[RelaxNode], config: &ChartConfig) -> Vec<RelaxNode> {
    let n = nodes.len();
    let mut state: Vec<RelaxNode> = nodes.to_vec();
    for s in state.iter_mut() {
        clamp(s, config.chart_radius);
    }
    let decay = 1.0 - 0.001f64.powf(1.0 / 300.0);
    let mut alpha = 1.0;
    let pad = config.collision_padding;
    let max_size = nodes.iter().map(|s| s.size).fold(0.0, f64::max);
    let heavy = config.parallel && n >= 64;
    let mut stuck = vec![0usize; n];
    for _ in 0..config.iterations {
        let points: Vec<Point> = state.iter().map(|s| Point::polar(s.theta, s.radius)).collect();
        let units: Vec<(f64, f64)> = state.iter().map(|s| (libm::cos(s.theta), libm::sin(s.theta))).collect();
        let grid = Grid::new(&points, (2.0 * max_size + pad).max(1e-6));
        let moves: Vec<(f64, f64)> = par::map_range(n, heavy, |i| {
            let a = &state[i];
            let pa = points[i];
            let (mut dtan, mut drad) = (0.0, 0.0);
            let mut near: Vec<usize> = grid.near(&pa).filter(|&j| j != i).collect();
            near.sort_unstable();
            for j in near {
                let b = &state[j];
                let pb = points[j];
                let (vx, vy) = (pa.x - pb.x, pa.y - pb.y);
                let min = a.size + b.size + pad;
                let dist = vx.hypot(vy);
                if dist >= min {
                    continue;
                }
                // local frame on the bisector of the two radial directions
                let (bx, by) = (units[i].0 + units[j].0, units[i].1 + units[j].1);
                let bn = bx.hypot(by);
                let er = if bn > 1e-12 { (bx / bn, by / bn) } else { units[i] };
                let et = (-er.1, er.0);
                let dr = vx * er.0 + vy * er.1;
                let dt = vx * et.0 + vy * et.1;
                let tie = if i < j { 1.0 } else { -1.0 };
                let tan_sign = if dt.abs() > 1e-9 { dt.signum() } else { tie };
                let need = (min * min - dr * dr).max(0.0).sqrt();
                dtan += tan_sign * 0.5 * (need - dt.abs()).max(0.0);
                if dist > 1e-9 {
                    drad += 0.5 * (min - dist) * dr / dist;
                }
            }
            (dtan, drad)
        });
        for ((s, (dtan, dpush)), stuck) in state.iter_mut().zip(moves).zip(stuck.iter_mut()) {
            let radial_pull = config.radial_strength * alpha * (s.radius_target - s.radius);
            if dtan == 0.0 && dpush == 0.0 {
                *stuck = 0;
                s.radius += radial_pull;
                clamp(s, config.chart_radius);
                continue;
            }
            *stuck += 1;
            let before = s.theta;
            let wanted = 0.5 * dtan / s.radius;
            s.theta += wanted;
            clamp(s, config.chart_radius);
            let blocked = if wanted.abs() > 0.0 {
                (1.0 - (s.theta - before) / wanted).clamp(0.0, 1.0)
            } else {
                1.0
            };
            let share = (config.radial_leak + blocked + *stuck as f64 / STUCK_RAMP).min(1.0);
            s.radius += radial_pull + 0.5 * share * dpush;
            clamp(s, config.chart_radius);
        }
        alpha *= 1.0 - decay;
    }
    state
}

/// Number of overlapping pairs beyond `tolerance` px.
pub fn count_overlaps(nodes: &[ChartNode], tolerance: f64) -> usize {
    let mut c = 0;
    for i in 0..nodes.len() {
        for j in i + 1..nodes.len() {
            let gap = nodes[i].position.distance(&nodes[j].position) - nodes[i].radius_px - nodes[j].radius_px;
            if gap < -tolerance {
                c += 1;
            }
        }
    }
    c
}

pub fn build_uncertainty_chart(
    inputs: &[ChartInput],
    sectors: &SectorAllocation,
    labels: &BTreeMap<usize, String>,
    config: &ChartConfig,
) -> ChartLayout {
    let mut by_cluster: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, n) in inputs.iter().enumerate() {
        by_cluster.entry(n.cluster_id).or_default().push(i);
    }
    let mut theta_target = vec![0.0; inputs.len()];
    for (cid, members) in &by_cluster {
        let sector = sectors
            .sectors
            .get(cid)
            .copied()
            .unwrap_or(Sector { start: 0.0, end: TAU });
        let mean = crate::circular::circular_mean(&members.iter().map(|&i| inputs[i].theta).collect::<Vec<_>>());
        let offsets: Vec<f64> = members.iter().map(|&i| signed_angle(inputs[i].theta - mean)).collect();
        let (lo, hi) = offsets
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &o| (l.min(o), h.max(o)));
        let inset = config.sector_inset * sector.span();
        let (a, b) = (sector.start + inset, sector.end - inset);
        for (&i, &o) in members.iter().zip(&offsets) {
            theta_target[i] = if hi - lo <= 1e-12 {
                sector.mid()
            } else {
                a + (b - a) * (o - lo) / (hi - lo)
            };
        }
    }
    let relax: Vec<RelaxNode> = inputs
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let sector = sectors
                .sectors
                .get(&n.cluster_id)
                .copied()
                .unwrap_or(Sector { start: 0.0, end: TAU });
            let mut node = RelaxNode {
                theta: theta_target[i],
                radius: config.radius_for(n.uncertainty),
                radius_target: config.radius_for(n.uncertainty),
                size: config.node_radius,
                sector,
            };
            clamp(&mut node, config.chart_radius);
            node.radius_target = node.radius;
            theta_target[i] = node.theta;
            node
        })
        .collect();
    let settled = force_relax(&relax, config);
    let nodes = inputs
        .iter()
        .zip(relax.iter().zip(&settled))
        .map(|(inp, (start, end))| ChartNode {
            snippet_id: inp.snippet_id.clone(),
            cluster_id: inp.cluster_id,
            uncertainty: inp.uncertainty,
            theta_target: start.theta,
            radius_target: start.radius_target,
            theta: end.theta,
            radius: end.radius,
            position: Point::polar(end.theta, end.radius),
            radius_px: end.size,
        })
        .collect();
    let sectors = sectors
        .order
        .iter()
        .map(|cid| {
            let s = sectors.sectors[cid];
            ChartSector {
                cluster_id: *cid,
                sector: s,
                label: labels
                    .get(cid)
                    .cloned()
                    .unwrap_or_else(|| crate::cluster::fallback_label(*cid)),
                label_position: Point::polar(s.mid(), config.chart_radius * 1.04),
                size: by_cluster.get(cid).map_or(0, Vec::len),
            }
        })
        .collect();
    ChartLayout {
        chart_radius: config.chart_radius,
        r_min: config.r_min(),
        r_max: config.r_max(),
        nodes,
        sectors,
    }
}

impl ChartLayout {
    pub fn overlaps(&self, tolerance: f64) -> usize {
        count_overlaps(&self.nodes, tolerance)
    }

    /// Every node center inside its sector and the chart disk.
    pub fn contained(&self) -> bool {
        self.nodes.iter().all(|n| {
            let s = self
                .sectors
                .iter()
                .find(|s| s.cluster_id == n.cluster_id)
                .map(|s| s.sector);
            let inside = s.is_none_or(|s| s.contains(n.theta));
            inside && n.radius <= self.chart_radius + 1e-9
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circular::allocate_sectors;

    fn node(theta: f64, r: f64, sector: Sector) -> RelaxNode {
        RelaxNode {
            theta,
            radius: r,
            radius_target: r,
            size: 8.0,
            sector,
        }
    }

    fn cfg() -> ChartConfig {
        ChartConfig {
            parallel: false,
            ..Default::default()
        }
    }

    #[test]
    fn coincident_circles_reach_tangency_keeping_radii() {
        let full = Sector { start: 0.0, end: TAU };
        let out = force_relax(&[node(1.0, 150.0, full), node(1.0, 150.0, full)], &cfg());
        let d = Point::polar(out[0].theta, out[0].radius).distance(&Point::polar(out[1].theta, out[1].radius));
        assert!((16.0 - 1e-6..=16.6).contains(&d), "{d}");
        assert!((out[0].radius - 150.0).abs() < 1e-3);
        assert!((out[1].radius - 150.0).abs() < 1e-3);
    }

    #[test]
    fn separated_input_is_a_fixed_point() {
        let full = Sector { start: 0.0, end: TAU };
        let input = vec![node(0.5, 100.0, full), node(2.5, 200.0, full)];
        assert_eq!(force_relax(&input, &cfg()), input);
    }

    #[test]
    fn drifted_target_is_clamped_into_its_sector() {
        let s = Sector { start: 1.0, end: 2.0 };
        let out = force_relax(&[node(2.7, 120.0, s)], &cfg());
        assert!(s.contains(out[0].theta));
        assert!(out[0].theta <= 2.0 - 8.0 / 120.0 + 1e-12);
    }

    #[test]
    fn radius_mapping() {
        let c = ChartConfig::default();
        assert_eq!(c.radius_for(0.0), 45.0);
        assert_eq!(c.radius_for(1.0), 285.0);
        assert!(c.radius_for(0.3) < c.radius_for(0.31));
    }

    fn inputs(thetas: &[(f64, usize, f64)]) -> Vec<ChartInput> {
        thetas
            .iter()
            .enumerate()
            .map(|(i, &(t, c, u))| ChartInput {
                snippet_id: format!("s{i}"),
                uncertainty: u,
                theta: t,
                cluster_id: c,
            })
            .collect()
    }

    #[test]
    fn one_node_per_cluster_sits_on_target() {
        let inp = inputs(&[(0.2, 0, 0.3), (2.0, 1, 0.7), (4.0, 2, 0.0)]);
        let mut m = BTreeMap::new();
        for i in &inp {
            m.entry(i.cluster_id).or_insert_with(Vec::new).push(i.theta);
        }
        let sectors = allocate_sectors(&m, 2f64.to_radians());
        let chart = build_uncertainty_chart(&inp, &sectors, &BTreeMap::new(), &cfg());
        for n in &chart.nodes {
            assert_eq!(n.theta, n.theta_target);
            assert_eq!(n.radius, n.radius_target);
            assert_eq!(n.radius_target, cfg().radius_for(n.uncertainty));
        }
        assert!(chart.contained());
        assert_eq!(
            chart.sectors[0].label,
            format!("cluster-{}", chart.sectors[0].cluster_id)
        );
    }

    #[test]
    fn zero_uncertainty_sits_on_the_inner_ring() {
        let inp = inputs(&[(0.0, 0, 0.0), (3.0, 0, 0.0)]);
        let m: BTreeMap<usize, Vec<f64>> = [(0, vec![0.0, 3.0])].into_iter().collect();
        let chart = build_uncertainty_chart(&inp, &allocate_sectors(&m, 0.0), &BTreeMap::new(), &cfg());
        assert!(chart.nodes.iter().all(|n| n.radius_target == 45.0));
    }
}
