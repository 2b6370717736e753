use std::fmt::Write;

use layoutgen::layout::{CoordSpace, LayoutJson, LayoutSchema};

/// Fill colours keyed by category index; indices past the end wrap around.
#[derive(Clone, Debug, PartialEq)]
pub struct Palette(pub Vec<String>);

impl Default for Palette {
    fn default() -> Self {
        Palette(
            ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac"]
                .map(String::from)
                .to_vec(),
        )
    }
}

impl Palette {
    pub fn color(&self, category: usize) -> &str {
        if self.0.is_empty() {
            return "#888888";
        }
        &self.0[category % self.0.len()]
    }
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// One labelled rectangle per element, drawn in canvas units.
pub fn render_svg(layout: &LayoutJson, schema: &LayoutSchema, palette: &Palette) -> String {
    let (cw, ch) = (layout.canvas.w, layout.canvas.h);
    let (sx, sy) = match layout.coords {
        CoordSpace::Normalized => (cw, ch),
        CoordSpace::Absolute => (1.0, 1.0),
    };
    let font = (cw.min(ch) / 30.0).max(f64::MIN_POSITIVE);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {cw} {ch}" width="{cw}" height="{ch}">"#
    );
    for e in &layout.elements {
        let idx = schema.category_index(&e.category).unwrap_or(usize::MAX);
        let fill = palette.color(idx);
        let (x, y, w, h) = (e.x * sx, e.y * sy, e.w * sx, e.h * sy);
        let label = escape(&e.category);
        let _ = writeln!(svg, r#"  <g class="element" data-category="{label}">"#);
        let _ = writeln!(
            svg,
            r##"    <rect x="{x}" y="{y}" width="{w}" height="{h}" fill="{fill}" fill-opacity="0.6" stroke="#333333"/>"##
        );
        let _ = writeln!(
            svg,
            r#"    <text x="{}" y="{}" font-size="{font}" font-family="sans-serif">{label}</text>"#,
            x + font * 0.3,
            y + font * 1.1
        );
        svg.push_str("  </g>\n");
    }
    svg.push_str("</svg>\n");
    svg
}
