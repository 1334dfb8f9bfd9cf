//! Node-link diagram of the links mined from one snippet.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use super::Point;
use crate::pipeline::LinkResult;
use crate::taxonomy::VariableRef;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkGraphConfig {
    pub base_radius: f64,
    pub radius_per_degree: f64,
    pub spring_length: f64,
    pub iterations: usize,
}

impl Default for LinkGraphConfig {
    fn default() -> Self {
        Self {
            base_radius: 10.0,
            radius_per_degree: 6.0,
            spring_length: 140.0,
            iterations: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkGraphNode {
    pub variable: VariableRef,
    pub degree: usize,
    pub radius: f64,
    pub color: String,
    pub position: Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkGraphEdge {
    pub source: VariableRef,
    pub target: VariableRef,
    pub label: String,
    pub opacity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule_override: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkGraphLayout {
    pub nodes: Vec<LinkGraphNode>,
    pub edges: Vec<LinkGraphEdge>,
}

pub fn build_link_graph(links: &[LinkResult], config: &LinkGraphConfig) -> LinkGraphLayout {
    let mut degree: BTreeMap<VariableRef, usize> = BTreeMap::new();
    for l in links {
        *degree.entry(l.source.clone()).or_default() += 1;
        *degree.entry(l.target.clone()).or_default() += 1;
    }
    let vars: Vec<VariableRef> = degree.keys().cloned().collect();
    let index: BTreeMap<&VariableRef, usize> = vars.iter().enumerate().map(|(i, v)| (v, i)).collect();
    let n = vars.len();
    let radius: Vec<f64> = vars
        .iter()
        .map(|v| config.base_radius + config.radius_per_degree * (degree[v] as f64).sqrt())
        .collect();
    let start_r = config.spring_length * (n as f64).sqrt() / 2.0;
    let mut pos: Vec<Point> = (0..n)
        .map(|i| {
            if n == 1 {
                Point::default()
            } else {
                Point::polar(TAU * i as f64 / n as f64, start_r)
            }
        })
        .collect();
    let springs: Vec<(usize, usize)> = links
        .iter()
        .map(|l| (index[&l.source], index[&l.target]))
        .filter(|(a, b)| a != b)
        .collect();
    for it in 0..config.iterations {
        let alpha = 1.0 - it as f64 / config.iterations as f64;
        let mut delta = vec![Point::default(); n];
        for &(a, b) in &springs {
            let (dx, dy) = (pos[b].x - pos[a].x, pos[b].y - pos[a].y);
            let d = dx.hypot(dy).max(1e-9);
            let f = 0.1 * alpha * (d - config.spring_length) / d;
            delta[a].x += f * dx;
            delta[a].y += f * dy;
            delta[b].x -= f * dx;
            delta[b].y -= f * dy;
        }
        for i in 0..n {
            for j in i + 1..n {
                let (dx, dy) = (pos[i].x - pos[j].x, pos[i].y - pos[j].y);
                let d = dx.hypot(dy);
                let (ux, uy) = if d > 1e-9 { (dx / d, dy / d) } else { (1.0, 0.0) };
                // weak repulsion plus hard collision
                let mut push = 200.0 * alpha / d.max(1.0);
                let min = radius[i] + radius[j] + 4.0;
                if d < min {
                    push += 0.5 * (min - d);
                }
                delta[i].x += ux * push;
                delta[i].y += uy * push;
                delta[j].x -= ux * push;
                delta[j].y -= uy * push;
            }
        }
        for (p, d) in pos.iter_mut().zip(&delta) {
            p.x += d.x;
            p.y += d.y;
        }
    }
    // recenter on the centroid
    if n > 0 {
        let cx = pos.iter().map(|p| p.x).sum::<f64>() / n as f64;
        let cy = pos.iter().map(|p| p.y).sum::<f64>() / n as f64;
        for p in pos.iter_mut() {
            p.x -= cx;
            p.y -= cy;
        }
    }
    let nodes = vars
        .iter()
        .enumerate()
        .map(|(i, v)| LinkGraphNode {
            variable: v.clone(),
            degree: degree[v],
            radius: radius[i],
            color: v.indicator.color().to_owned(),
            position: pos[i],
        })
        .collect();
    let edges = links
        .iter()
        .map(|l| LinkGraphEdge {
            source: l.source.clone(),
            target: l.target.clone(),
            label: l.relationship.clone(),
            opacity: (1.0 - l.uncertainty).clamp(0.0, 1.0),
            rule_override: l.rule_override.clone(),
        })
        .collect();
    LinkGraphLayout { nodes, edges }
}
