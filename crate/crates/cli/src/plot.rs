//! Accuracy-curve rendering: a self-contained SVG polyline chart, no
//! external tooling. Fidelity is best-effort; the numbers live in the
//! CSVs this reads.

use anyhow::Result;

use crate::invalid;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_L: f64 = 56.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

pub fn render(title: &str, curves: &[(String, Vec<(usize, f64)>)]) -> Result<String> {
    if curves.is_empty() || curves.iter().any(|(_, pts)| pts.is_empty()) {
        return Err(invalid("plot needs at least one non-empty curve"));
    }
    let x_min = curves.iter().flat_map(|(_, p)| p.iter().map(|(c, _)| *c)).min().expect("non-empty");
    let x_max = curves.iter().flat_map(|(_, p)| p.iter().map(|(c, _)| *c)).max().expect("non-empty");
    let span = (x_max - x_min).max(1) as f64;
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let x_of = |c: usize| MARGIN_L + (c - x_min) as f64 / span * plot_w;
    // Accuracy is a fraction; a fixed [0, 1] axis keeps charts comparable.
    let y_of = |a: f64| MARGIN_T + (1.0 - a.clamp(0.0, 1.0)) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    ));

    // Horizontal grid and y labels at 0, 0.25, .., 1.
    for i in 0..=4 {
        let a = i as f64 / 4.0;
        let y = y_of(a);
        svg.push_str(&format!(
            "<line x1=\"{MARGIN_L}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{a:.2}</text>\n",
            WIDTH - MARGIN_R,
            MARGIN_L - 8.0,
            y + 4.0
        ));
    }
    // X ticks at each distinct checkpoint of the first curve (they are
    // few; curves from one evaluation share a grid anyway).
    for &(c, _) in &curves[0].1 {
        let x = x_of(c);
        svg.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>\n\
             <text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{c}</text>\n",
            MARGIN_T,
            HEIGHT - MARGIN_B,
            HEIGHT - MARGIN_B + 18.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">elapsed steps</text>\n",
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 10.0
    ));

    for (k, (label, points)) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> =
            points.iter().map(|&(c, a)| format!("{:.1},{:.1}", x_of(c), y_of(a))).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        for &(c, a) in points {
            svg.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>\n",
                x_of(c),
                y_of(a)
            ));
        }
        let ly = MARGIN_T + 16.0 * k as f64 + 4.0;
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            MARGIN_L + 8.0,
            MARGIN_L + 28.0,
            MARGIN_L + 34.0,
            ly + 4.0,
            escape(label)
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_a_wellformed_svg() {
        let curves = vec![
            ("teacher".to_string(), vec![(2, 0.2), (4, 0.5), (6, 0.9)]),
            ("student".to_string(), vec![(2, 0.3), (4, 0.6), (6, 0.9)]),
        ];
        let svg = render("demo", &curves).unwrap();
        assert!(svg.starts_with("<svg "));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("teacher") && svg.contains("student"));
    }

    #[test]
    fn single_point_curves_do_not_divide_by_zero() {
        let svg = render("one", &[("only".to_string(), vec![(5, 0.4)])]).unwrap();
        assert!(svg.contains("<circle"));
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(render("none", &[]).is_err());
        assert!(render("none", &[("x".to_string(), vec![])]).is_err());
    }

    #[test]
    fn labels_are_escaped() {
        let svg = render("t", &[("a<b&c".to_string(), vec![(1, 0.1)])]).unwrap();
        assert!(svg.contains("a&lt;b&amp;c"));
    }
}
