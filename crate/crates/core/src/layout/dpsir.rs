//! Radial DPSIR graph with progressive disclosure: indicator blocks on a
//! circle, opened blocks expanded into variable grids, links bundled by
//! their visible endpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use super::Point;
use crate::circular::Sector;
use crate::pipeline::LinkResult;
use crate::taxonomy::{IndicatorKind, VariableRef};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpsirConfig {
    /// Distance of block centers from the origin (outer radius 1).
    pub block_radius: f64,
    pub closed_size: f64,
    pub cell_size: f64,
    pub width_min: f64,
    pub width_max: f64,
}

impl Default for DpsirConfig {
    fn default() -> Self {
        Self {
            block_radius: 0.62,
            closed_size: 0.16,
            cell_size: 0.07,
            width_min: 1.0,
            width_max: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub variable: VariableRef,
    pub degree: usize,
    pub saturation: f64,
    pub row: usize,
    pub col: usize,
    pub corner: bool,
    pub position: Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpsirBlock {
    pub indicator: IndicatorKind,
    pub color: String,
    pub degree: usize,
    pub sector: Sector,
    pub opened: bool,
    pub position: Point,
    /// Side length of the drawn square.
    pub size: f64,
    pub grid_side: usize,
    pub cells: Vec<GridCell>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Endpoint {
    Block { indicator: IndicatorKind },
    Variable { variable: VariableRef },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpsirEdge {
    pub source: Endpoint,
    pub target: Endpoint,
    pub from: Point,
    pub to: Point,
    /// Distinct snippets asserting a link between the two endpoints.
    pub intensity: usize,
    pub width: f64,
    pub opacity: f64,
    pub color: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpsirGraphLayout {
    /// Visible blocks in D, P, S, I, R order.
    pub blocks: Vec<DpsirBlock>,
    pub edges: Vec<DpsirEdge>,
    pub hidden: Vec<IndicatorKind>,
}

impl DpsirGraphLayout {
    pub fn block(&self, kind: IndicatorKind) -> Option<&DpsirBlock> {
        self.blocks.iter().find(|b| b.indicator == kind)
    }
}

/// Incident link count per variable, with multiplicity across snippets.
pub fn variable_degrees(links: &[LinkResult]) -> BTreeMap<VariableRef, usize> {
    let mut d: BTreeMap<VariableRef, usize> = BTreeMap::new();
    for l in links {
        *d.entry(l.source.clone()).or_default() += 1;
        *d.entry(l.target.clone()).or_default() += 1;
    }
    d
}

/// Cell order: the four corners first, then the rest row-major.
pub fn grid_slots(side: usize) -> Vec<(usize, usize)> {
    if side == 0 {
        return vec![];
    }
    let last = side - 1;
    let mut slots: Vec<(usize, usize)> = Vec::new();
    for c in [(0, 0), (0, last), (last, 0), (last, last)] {
        if !slots.contains(&c) {
            slots.push(c);
        }
    }
    for r in 0..side {
        for c in 0..side {
            if !slots.contains(&(r, c)) {
                slots.push((r, c));
            }
        }
    }
    slots
}

fn grid_side(m: usize) -> usize {
    (1..).find(|s| s * s >= m).unwrap_or(1)
}

pub fn build_dpsir_graph(
    links: &[LinkResult],
    variables: &[VariableRef],
    visible: &BTreeSet<IndicatorKind>,
    opened: &BTreeSet<IndicatorKind>,
    config: &DpsirConfig,
) -> DpsirGraphLayout {
    let degrees = variable_degrees(links);
    let mut per_block: BTreeMap<IndicatorKind, Vec<(VariableRef, usize)>> = BTreeMap::new();
    let mut all: BTreeSet<VariableRef> = variables.iter().filter(|v| !v.is_miscellaneous()).cloned().collect();
    all.extend(degrees.keys().cloned());
    for v in all {
        let d = degrees.get(&v).copied().unwrap_or(0);
        per_block.entry(v.indicator).or_default().push((v, d));
    }
    let shown: Vec<IndicatorKind> = IndicatorKind::ALL.into_iter().filter(|k| visible.contains(k)).collect();
    let totals: Vec<usize> = shown
        .iter()
        .map(|k| per_block.get(k).map_or(0, |v| v.iter().map(|x| x.1).sum()))
        .collect();
    let grand: usize = totals.iter().sum();
    let proportional = shown.len() == IndicatorKind::ALL.len() && grand > 0;
    let mut blocks = Vec::new();
    let mut cursor = 0.0;
    for (k, &total) in shown.iter().zip(&totals) {
        let span = if proportional {
            TAU * total as f64 / grand as f64
        } else {
            TAU / shown.len() as f64
        };
        let sector = Sector {
            start: cursor,
            end: cursor + span,
        };
        cursor += span;
        let center = Point::polar(sector.mid(), config.block_radius);
        let is_open = opened.contains(k);
        let mut vars = per_block.get(k).cloned().unwrap_or_default();
        vars.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let max_deg = vars.iter().map(|v| v.1).max().unwrap_or(0);
        let side = grid_side(vars.len());
        let cells = if is_open {
            let slots = grid_slots(side);
            let off = (side as f64 - 1.0) / 2.0;
            vars.iter()
                .zip(slots)
                .map(|((v, d), (r, c))| GridCell {
                    variable: v.clone(),
                    degree: *d,
                    saturation: if max_deg > 0 {
                        0.2 + 0.8 * *d as f64 / max_deg as f64
                    } else {
                        0.2
                    },
                    row: r,
                    col: c,
                    corner: (r == 0 || r == side - 1) && (c == 0 || c == side - 1),
                    position: Point::new(
                        center.x + (c as f64 - off) * config.cell_size,
                        center.y + (off - r as f64) * config.cell_size,
                    ),
                })
                .collect()
        } else {
            vec![]
        };
        blocks.push(DpsirBlock {
            indicator: *k,
            color: k.color().to_owned(),
            degree: total,
            sector,
            opened: is_open,
            position: center,
            size: if is_open {
                (side as f64 * config.cell_size).max(config.closed_size)
            } else {
                config.closed_size
            },
            grid_side: if is_open { side } else { 0 },
            cells,
        });
    }
    let anchor = |e: &Endpoint| -> Point {
        match e {
            Endpoint::Block { indicator } => blocks
                .iter()
                .find(|b| b.indicator == *indicator)
                .map(|b| b.position)
                .unwrap_or_default(),
            Endpoint::Variable { variable } => blocks
                .iter()
                .flat_map(|b| &b.cells)
                .find(|c| &c.variable == variable)
                .map(|c| c.position)
                .unwrap_or_default(),
        }
    };
    let endpoint = |v: &VariableRef| {
        if opened.contains(&v.indicator) {
            Endpoint::Variable { variable: v.clone() }
        } else {
            Endpoint::Block { indicator: v.indicator }
        }
    };
    let mut bundles: BTreeMap<(Endpoint, Endpoint), BTreeSet<&str>> = BTreeMap::new();
    for l in links {
        if !visible.contains(&l.source.indicator) || !visible.contains(&l.target.indicator) {
            continue;
        }
        let (s, t) = (endpoint(&l.source), endpoint(&l.target));
        if s == t {
            continue;
        }
        bundles.entry((s, t)).or_default().insert(&l.snippet_id);
    }
    let max_int = bundles.values().map(BTreeSet::len).max().unwrap_or(0).max(1);
    let edges = bundles
        .into_iter()
        .map(|((s, t), snippets)| {
            let i = snippets.len();
            let frac = i as f64 / max_int as f64;
            let color = match &s {
                Endpoint::Block { indicator } => indicator.color(),
                Endpoint::Variable { variable } => variable.indicator.color(),
            };
            DpsirEdge {
                from: anchor(&s),
                to: anchor(&t),
                source: s,
                target: t,
                intensity: i,
                width: config.width_min + (config.width_max - config.width_min) * frac,
                opacity: 0.25 + 0.75 * frac,
                color: color.to_owned(),
            }
        })
        .collect();
    DpsirGraphLayout {
        blocks,
        edges,
        hidden: IndicatorKind::ALL
            .into_iter()
            .filter(|k| !visible.contains(k))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use IndicatorKind::*;

    fn link(snippet: &str, a: VariableRef, b: VariableRef) -> LinkResult {
        LinkResult {
            snippet_id: snippet.into(),
            source: a,
            target: b,
            relationship: String::new(),
            evidence: vec![],
            explanation: String::new(),
            uncertainty: 0.0,
            support: 1.0,
            rule_override: None,
        }
    }

    fn all() -> BTreeSet<IndicatorKind> {
        IndicatorKind::ALL.into_iter().collect()
    }

    /// Links giving per-indicator total degrees D:40 P:20 S:20 I:10 R:10.
    fn weighted() -> Vec<LinkResult> {
        let v = |k: IndicatorKind| VariableRef::new(k, "v");
        let mut out = Vec::new();
        for i in 0..20 {
            out.push(link(&format!("a{i}"), v(Driver), v(Pressure)));
            out.push(link(&format!("b{i}"), v(Driver), v(State)));
        }
        for i in 0..10 {
            out.push(link(&format!("c{i}"), v(Impact), v(Response)));
        }
        out
    }

    #[test]
    fn proportional_when_all_visible() {
        let g = build_dpsir_graph(&weighted(), &[], &all(), &BTreeSet::new(), &DpsirConfig::default());
        assert!((g.block(Driver).unwrap().sector.span() - TAU * 0.4).abs() < 1e-12);
        let total: f64 = g.blocks.iter().map(|b| b.sector.span()).sum();
        assert!((total - TAU).abs() < 1e-12);
    }

    #[test]
    fn even_spacing_when_any_hidden() {
        let mut vis = all();
        vis.remove(&State);
        vis.remove(&Impact);
        let g = build_dpsir_graph(&weighted(), &[], &vis, &BTreeSet::new(), &DpsirConfig::default());
        assert_eq!(g.blocks.len(), 3);
        let mids: Vec<f64> = g.blocks.iter().map(|b| b.sector.mid()).collect();
        assert!((mids[1] - mids[0] - TAU / 3.0).abs() < 1e-12);
        assert!((mids[2] - mids[1] - TAU / 3.0).abs() < 1e-12);
        assert_eq!(g.hidden, vec![State, Impact]);
        // edges touching hidden blocks are dropped
        assert!(g
            .edges
            .iter()
            .all(|e| !matches!(e.target, Endpoint::Block { indicator: State })));
    }

    #[test]
    fn opened_block_grid_corners_and_saturation() {
        let drivers: Vec<VariableRef> = (0..9).map(|i| VariableRef::new(Driver, format!("d{i}"))).collect();
        let mut links = Vec::new();
        for (i, d) in drivers.iter().enumerate() {
            for r in 0..(i + 1) {
                links.push(link(&format!("s{i}-{r}"), d.clone(), VariableRef::new(Pressure, "p")));
            }
        }
        let opened: BTreeSet<_> = [Driver].into_iter().collect();
        let g = build_dpsir_graph(&links, &drivers, &all(), &opened, &DpsirConfig::default());
        let b = g.block(Driver).unwrap();
        assert_eq!(b.grid_side, 3);
        let corners: BTreeSet<String> = b
            .cells
            .iter()
            .filter(|c| c.corner)
            .map(|c| c.variable.name.clone())
            .collect();
        assert_eq!(
            corners,
            ["d8", "d7", "d6", "d5"].iter().map(|s| s.to_string()).collect()
        );
        for x in &b.cells {
            for y in &b.cells {
                if x.degree < y.degree {
                    assert!(x.saturation < y.saturation);
                }
            }
        }
        // edges from opened variables to the closed pressure block
        assert_eq!(g.edges.len(), 9);
        let w = |name: &str| {
            g.edges
                .iter()
                .find(|e| {
                    e.source
                        == Endpoint::Variable {
                            variable: VariableRef::new(Driver, name),
                        }
                })
                .unwrap()
                .width
        };
        assert!(w("d8") > w("d0"));
    }

    #[test]
    fn intensity_counts_distinct_snippets() {
        let a = VariableRef::new(Driver, "a");
        let b = VariableRef::new(Pressure, "b");
        let links = vec![
            link("s1", a.clone(), b.clone()),
            link("s1", a.clone(), b.clone()),
            link("s2", a, b),
        ];
        let g = build_dpsir_graph(&links, &[], &all(), &BTreeSet::new(), &DpsirConfig::default());
        assert_eq!(g.edges[0].intensity, 2);
    }

    #[test]
    fn corner_slots() {
        assert_eq!(grid_slots(1), vec![(0, 0)]);
        assert_eq!(&grid_slots(3)[..4], &[(0, 0), (0, 2), (2, 0), (2, 2)]);
        assert_eq!(grid_slots(3).len(), 9);
    }
}
