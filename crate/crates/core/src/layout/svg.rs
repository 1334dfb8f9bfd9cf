//! Static SVG rendering of layouts, using the shared indicator palette.

use std::fmt::Write;

use super::chart::ChartLayout;
use super::dpsir::DpsirGraphLayout;
use super::keywords::KeywordCloud;
use super::linkgraph::LinkGraphLayout;
use super::Point;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

struct Canvas {
    out: String,
    half: f64,
    scale: f64,
}

impl Canvas {
    fn new(half: f64, scale: f64) -> Self {
        let size = 2.0 * half;
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size:.0}" height="{size:.0}" viewBox="0 0 {size:.0} {size:.0}">"#
        );
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        Self { out, half, scale }
    }

    /// Layout coordinates have y up; SVG has y down.
    fn map(&self, p: Point) -> (f64, f64) {
        (self.half + self.scale * p.x, self.half - self.scale * p.y)
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

/// Colour of an uncertainty score on a light-to-dark ramp.
fn uncertainty_fill(u: f64) -> String {
    let u = u.clamp(0.0, 1.0);
    let c = |a: u8, b: u8| (a as f64 + (b as f64 - a as f64) * u).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(0xc6, 0x08), c(0xdb, 0x30), c(0xef, 0x6b))
}

pub fn chart_svg(layout: &ChartLayout) -> String {
    let half = layout.chart_radius * 1.25;
    let mut c = Canvas::new(half, 1.0);
    let (cx, cy) = c.map(Point::default());
    for r in [layout.r_min, layout.r_max] {
        let _ = writeln!(
            c.out,
            r##"<circle cx="{cx:.2}" cy="{cy:.2}" r="{r:.2}" fill="none" stroke="#dddddd"/>"##
        );
    }
    for s in &layout.sectors {
        for a in [s.sector.start, s.sector.end] {
            let (x, y) = c.map(Point::polar(a, layout.chart_radius));
            let _ = writeln!(
                c.out,
                r##"<line x1="{cx:.2}" y1="{cy:.2}" x2="{x:.2}" y2="{y:.2}" stroke="#eeeeee"/>"##
            );
        }
        let (x, y) = c.map(s.label_position);
        let _ = writeln!(
            c.out,
            r#"<text x="{x:.2}" y="{y:.2}" font-size="12" text-anchor="middle">{}</text>"#,
            escape(&s.label)
        );
    }
    for n in &layout.nodes {
        let (x, y) = c.map(n.position);
        let _ = writeln!(
            c.out,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="{:.2}" fill="{}" data-snippet="{}"/>"#,
            n.radius_px,
            uncertainty_fill(n.uncertainty),
            escape(&n.snippet_id)
        );
    }
    c.finish()
}

pub fn keyword_svg(cloud: &KeywordCloud) -> String {
    let extent = cloud
        .items
        .iter()
        .map(|i| (i.position.x.abs() + i.width / 2.0).max(i.position.y.abs() + i.height / 2.0))
        .fold(50.0f64, f64::max);
    let mut c = Canvas::new(extent + 10.0, 1.0);
    for i in &cloud.items {
        let (x, y) = c.map(i.position);
        let shade = (200.0 * (1.0 - i.color_value)).round() as u8;
        let _ = writeln!(
            c.out,
            r##"<text x="{x:.2}" y="{:.2}" font-size="{:.2}" text-anchor="middle" fill="#{shade:02x}{shade:02x}{shade:02x}">{}</text>"##,
            y + i.font_size * 0.35,
            i.font_size,
            escape(&i.word)
        );
    }
    c.finish()
}

pub fn link_graph_svg(g: &LinkGraphLayout) -> String {
    let extent = g
        .nodes
        .iter()
        .map(|n| n.position.x.abs().max(n.position.y.abs()) + n.radius)
        .fold(50.0f64, f64::max);
    let mut c = Canvas::new(extent + 60.0, 1.0);
    let pos = |v| {
        g.nodes
            .iter()
            .find(|n| &n.variable == v)
            .map(|n| n.position)
            .unwrap_or_default()
    };
    for e in &g.edges {
        let (x1, y1) = c.map(pos(&e.source));
        let (x2, y2) = c.map(pos(&e.target));
        let _ = writeln!(
            c.out,
            r##"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="#555555" stroke-opacity="{:.3}"/>"##,
            e.opacity
        );
        let _ = writeln!(
            c.out,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle">{}</text>"#,
            (x1 + x2) / 2.0,
            (y1 + y2) / 2.0,
            escape(&e.label)
        );
    }
    for n in &g.nodes {
        let (x, y) = c.map(n.position);
        let _ = writeln!(
            c.out,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="{:.2}" fill="{}"/><text x="{x:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"#,
            n.radius,
            n.color,
            y + n.radius + 12.0,
            escape(&n.variable.name)
        );
    }
    c.finish()
}

pub fn dpsir_svg(g: &DpsirGraphLayout) -> String {
    let mut c = Canvas::new(400.0, 360.0);
    for e in &g.edges {
        let (x1, y1) = c.map(e.from);
        let (x2, y2) = c.map(e.to);
        let _ = writeln!(
            c.out,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{}" stroke-width="{:.2}" stroke-opacity="{:.3}"/>"#,
            e.color, e.width, e.opacity
        );
    }
    for b in &g.blocks {
        let (x, y) = c.map(b.position);
        let side = b.size * c.scale;
        let _ = writeln!(
            c.out,
            r#"<rect x="{:.2}" y="{:.2}" width="{side:.2}" height="{side:.2}" fill="{}" fill-opacity="{}" stroke="{}"/>"#,
            x - side / 2.0,
            y - side / 2.0,
            b.color,
            if b.opened { "0.1" } else { "0.8" },
            b.color
        );
        let _ = writeln!(
            c.out,
            r#"<text x="{x:.2}" y="{:.2}" font-size="13" text-anchor="middle">{}</text>"#,
            y - side / 2.0 - 6.0,
            b.indicator.name()
        );
        let cell = 0.9 * side / b.grid_side.max(1) as f64;
        for cl in &b.cells {
            let (x, y) = c.map(cl.position);
            let _ = writeln!(
                c.out,
                r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="{}" fill-opacity="{:.3}"><title>{}</title></rect>"#,
                x - cell / 2.0,
                y - cell / 2.0,
                b.color,
                cl.saturation,
                escape(&cl.variable.name)
            );
        }
    }
    c.finish()
}
