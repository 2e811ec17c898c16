//! Hand-rolled SVG: one panel per target example, each panel a grouped bar
//! chart of the class-probability vector before (red) and after (green) the
//! critic-driven steps. Everything emitted is numbers and fixed ASCII, so
//! escaping never comes up.

const BAR_W: f64 = 9.0;
const GROUP_GAP: f64 = 7.0;
const PLOT_H: f64 = 80.0;
const PANEL_PAD: f64 = 14.0;
const CAPTION_H: f64 = 14.0;
const COLS: usize = 5;
const BEFORE_FILL: &str = "#c0392b";
const AFTER_FILL: &str = "#27ae60";

pub fn grouped_bars(
    n_way: usize,
    labels: &[usize],
    before: &[Vec<f64>],
    after: &[Vec<f64>],
) -> String {
    let group_w = 2.0 * BAR_W + GROUP_GAP;
    let panel_w = n_way as f64 * group_w + 2.0 * PANEL_PAD;
    let panel_h = PLOT_H + CAPTION_H + 2.0 * PANEL_PAD;
    let n = before.len();
    let rows = n.div_ceil(COLS);
    let width = panel_w * COLS.min(n).max(1) as f64;
    let height = panel_h * rows.max(1) as f64 + 20.0;

    let mut s = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         font-family=\"sans-serif\" font-size=\"10\">\n"
    ));
    s.push_str(&format!(
        "<text x=\"{PANEL_PAD}\" y=\"13\">class probabilities per target example: \
         before (red) and after (green) the critic-driven steps</text>\n"
    ));
    for (i, (b, a)) in before.iter().zip(after).enumerate() {
        let x0 = (i % COLS) as f64 * panel_w + PANEL_PAD;
        let y0 = (i / COLS) as f64 * panel_h + PANEL_PAD + 20.0;
        let base = y0 + PLOT_H;
        for (c, (pb, pa)) in b.iter().zip(a).enumerate() {
            let gx = x0 + c as f64 * group_w;
            for (k, (p, fill)) in [(pb, BEFORE_FILL), (pa, AFTER_FILL)].iter().enumerate() {
                let h = **p * PLOT_H;
                s.push_str(&format!(
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{BAR_W}\" height=\"{:.2}\" fill=\"{fill}\"/>\n",
                    gx + k as f64 * BAR_W,
                    base - h,
                    h
                ));
            }
            s.push_str(&format!(
                "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{c}</text>\n",
                gx + BAR_W,
                base + 10.0
            ));
        }
        s.push_str(&format!(
            "<line x1=\"{x0:.2}\" y1=\"{base:.2}\" x2=\"{:.2}\" y2=\"{base:.2}\" stroke=\"#333\"/>\n",
            x0 + n_way as f64 * group_w - GROUP_GAP
        ));
        s.push_str(&format!(
            "<text x=\"{x0:.2}\" y=\"{:.2}\">example {i} (label {})</text>\n",
            base + CAPTION_H + 8.0,
            labels.get(i).copied().unwrap_or(0)
        ));
    }
    s.push_str("</svg>\n");
    s
}
