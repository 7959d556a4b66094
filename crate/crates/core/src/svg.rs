//! Deterministic SVG rendering of permutation reference distributions.
//! All coordinates and labels are rounded to 6 significant digits so
//! output is stable under string comparison.

use crate::bias::BiasEntry;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 62.0;
const MARGIN_R: f64 = 18.0;
const MARGIN_T: f64 = 46.0;
const MARGIN_B: f64 = 52.0;

/// Formats with 6 significant digits.
fn sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    // plain notation for moderate magnitudes, scientific otherwise
    let abs = v.abs();
    if (1e-4..1e6).contains(&abs) {
        let digits = abs.log10().floor() as i32;
        let decimals = (5 - digits).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        format!("{v:.5e}")
    }
}

/// Renders one histogram with a dashed vertical marker at the observed
/// statistic.
pub fn histogram_svg(entry: &BiasEntry) -> String {
    let hist = &entry.histogram;
    let nbins = hist.counts.len();
    let mut lo = hist.edges[0];
    let mut hi = hist.edges[nbins];
    // keep the observed marker inside the drawing
    if entry.observed < lo {
        lo = entry.observed;
    }
    if entry.observed > hi {
        hi = entry.observed;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pad = 0.03 * span;
    let (lo, hi) = (lo - pad, hi + pad);
    let max_count = hist.counts.iter().copied().max().unwrap_or(1).max(1) as f64;

    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let x_of = |v: f64| MARGIN_L + (v - lo) / (hi - lo) * plot_w;
    let y_of = |c: f64| MARGIN_T + (1.0 - c / max_count) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" \
         viewBox=\"0 0 {} {}\">\n",
        sig6(WIDTH),
        sig6(HEIGHT),
        sig6(WIDTH),
        sig6(HEIGHT)
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"22\" font-family=\"sans-serif\" font-size=\"15\" \
         text-anchor=\"middle\">Permutation reference distribution: {}</text>\n",
        sig6(WIDTH / 2.0),
        xml_escape(&entry.label)
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"40\" font-family=\"sans-serif\" font-size=\"12\" \
         text-anchor=\"middle\">observed = {}, p-value = {}, permutations = {}</text>\n",
        sig6(WIDTH / 2.0),
        sig6(entry.observed),
        sig6(entry.p_value),
        entry.n_permutations
    ));

    for (i, &count) in hist.counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let x0 = x_of(hist.edges[i]);
        let x1 = x_of(hist.edges[i + 1]);
        let y = y_of(count as f64);
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#7d9ec6\" \
             stroke=\"none\"/>\n",
            sig6(x0),
            sig6(y),
            sig6(x1 - x0),
            sig6(MARGIN_T + plot_h - y)
        ));
    }

    // axes
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        sig6(MARGIN_L),
        sig6(MARGIN_T + plot_h),
        sig6(MARGIN_L + plot_w),
        sig6(MARGIN_T + plot_h)
    ));
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        sig6(MARGIN_L),
        sig6(MARGIN_T),
        sig6(MARGIN_L),
        sig6(MARGIN_T + plot_h)
    ));
    for frac in [0.0, 0.5, 1.0] {
        let v = lo + frac * (hi - lo);
        let x = x_of(v);
        svg.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{y0}\" x2=\"{x}\" y2=\"{y1}\" stroke=\"black\"/>\n",
            x = sig6(x),
            y0 = sig6(MARGIN_T + plot_h),
            y1 = sig6(MARGIN_T + plot_h + 5.0)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" \
             text-anchor=\"middle\">{}</text>\n",
            sig6(x),
            sig6(MARGIN_T + plot_h + 20.0),
            sig6(v)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" \
         text-anchor=\"end\">{}</text>\n",
        sig6(MARGIN_L - 6.0),
        sig6(MARGIN_T + 4.0),
        sig6(max_count)
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" \
         text-anchor=\"end\">0</text>\n",
        sig6(MARGIN_L - 6.0),
        sig6(MARGIN_T + plot_h + 4.0)
    ));

    // dashed marker at the observed statistic
    let xo = x_of(entry.observed);
    svg.push_str(&format!(
        "<line x1=\"{x}\" y1=\"{y0}\" x2=\"{x}\" y2=\"{y1}\" stroke=\"#c62828\" \
         stroke-width=\"1.5\" stroke-dasharray=\"6,4\"/>\n",
        x = sig6(xo),
        y0 = sig6(MARGIN_T),
        y1 = sig6(MARGIN_T + plot_h)
    ));
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
