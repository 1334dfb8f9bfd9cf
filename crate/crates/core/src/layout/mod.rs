//! Pure layout geometry: uncertainty chart, keyword cloud, per-snippet link
//! graph and the radial DPSIR graph, plus SVG rendering.
//!
//! Chart, cloud and link-graph coordinates are pixels relative to the
//! drawing center with y pointing up; the DPSIR graph uses unit polar
//! coordinates (outer radius 1).

pub mod chart;
pub mod dpsir;
pub mod keywords;
pub mod linkgraph;
pub mod svg;

use serde::{Deserialize, Serialize};

pub use chart::{build_uncertainty_chart, force_relax, ChartConfig, ChartInput, ChartLayout, ChartNode, RelaxNode};
pub use dpsir::{build_dpsir_graph, DpsirGraphLayout};
pub use keywords::{build_keyword_cloud, KeywordCloud, KeywordItem, Projection};
pub use linkgraph::{build_link_graph, LinkGraphLayout};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn polar(theta: f64, r: f64) -> Self {
        Self {
            x: r * libm::cos(theta),
            y: r * libm::sin(theta),
        }
    }

    pub fn distance(&self, o: &Point) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }
}

/// Layout kinds served over the API and CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayoutKind {
    Uncertainty,
    Keywords,
    LinkGraph,
    Dpsir,
}

impl LayoutKind {
    pub const ALL: [LayoutKind; 4] = [
        LayoutKind::Uncertainty,
        LayoutKind::Keywords,
        LayoutKind::LinkGraph,
        LayoutKind::Dpsir,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            LayoutKind::Uncertainty => "uncertainty",
            LayoutKind::Keywords => "keywords",
            LayoutKind::LinkGraph => "link-graph",
            LayoutKind::Dpsir => "dpsir",
        }
    }

    pub fn from_slug(s: &str) -> Option<Self> {
        if s == "linkgraph" {
            return Some(LayoutKind::LinkGraph);
        }
        Self::ALL.into_iter().find(|k| k.slug() == s)
    }
}

/// Linear map of `v` from [lo, hi] onto [a, b]; the upper end when the range
/// is empty.
pub(crate) fn lerp_range(v: f64, lo: f64, hi: f64, a: f64, b: f64) -> f64 {
    if hi - lo <= f64::EPSILON {
        b
    } else {
        a + (b - a) * (v - lo) / (hi - lo)
    }
}
