//! Minimal SVG charts from the CSV tables the sweeps write.

use std::fmt::Write;

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines.next().ok_or("empty CSV")?.split(',').map(|s| s.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (i, l) in lines.enumerate() {
            let r: Vec<String> = l.split(',').map(|s| s.trim().to_string()).collect();
            if r.len() != header.len() {
                return Err(format!("line {}: expected {} columns, got {}", i + 2, header.len(), r.len()));
            }
            rows.push(r);
        }
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Result<usize, String> {
        self.header.iter().position(|h| h == name).ok_or_else(|| format!("no column '{name}' in {:?}", self.header))
    }
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn frame(svg: &mut String, title: &str, xlabel: &str, ylabel: &str, y0: f64, y1: f64) {
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>
<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/>
<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>
<text x="{}" y="{}" text-anchor="middle">{}</text>
<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>
"#,
        W / 2.0,
        esc(title),
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD,
        W / 2.0,
        H - 12.0,
        esc(xlabel),
        H / 2.0,
        H / 2.0,
        esc(ylabel)
    );
    for k in 0..=4 {
        let v = y0 + (y1 - y0) * k as f64 / 4.0;
        let y = H - PAD - (H - 2.0 * PAD) * k as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, PAD - 6.0, y + 4.0, crate::eval::fmt_sig(v, 3));
    }
}

fn y_range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let lo = lo.min(0.0);
    if hi <= lo {
        (lo, lo + 1.0)
    } else {
        (lo, hi)
    }
}

/// Line chart of `y` columns against `x`, one series per value of `group`.
/// Non-numeric `x` values are placed at equal spacing in row order.
pub fn line_chart(t: &Table, x: &str, ys: &[&str], group: Option<&str>, title: &str) -> Result<String, String> {
    let xi = t.column(x)?;
    let yi: Vec<usize> = ys.iter().map(|y| t.column(y)).collect::<Result<_, _>>()?;
    let gi = group.map(|g| t.column(g)).transpose()?;
    let mut groups: Vec<String> = Vec::new();
    for r in &t.rows {
        let g = gi.map(|i| r[i].clone()).unwrap_or_default();
        if !groups.contains(&g) {
            groups.push(g);
        }
    }
    let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| format!("non-numeric {what} value '{s}'"));
    let numeric_x = t.rows.iter().all(|r| r[xi].parse::<f64>().is_ok());
    let mut cats: Vec<String> = Vec::new();
    for r in &t.rows {
        if !cats.contains(&r[xi]) {
            cats.push(r[xi].clone());
        }
    }
    let xpos = |s: &str| -> f64 {
        if numeric_x {
            s.parse().unwrap_or(0.0)
        } else {
            cats.iter().position(|c| c == s).unwrap_or(0) as f64
        }
    };
    let xs: Vec<f64> = t.rows.iter().map(|r| xpos(&r[xi])).collect();
    let (x0, x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let (x0, x1) = if x1 > x0 { (x0, x1) } else { (x0 - 0.5, x0 + 0.5) };
    let mut all = Vec::new();
    for r in &t.rows {
        for &i in &yi {
            all.push(num(&r[i], &t.header[i])?);
        }
    }
    let (y0, y1) = y_range(all.into_iter());
    let sx = |v: f64| PAD + (W - 2.0 * PAD) * (v - x0) / (x1 - x0);
    let sy = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - y0) / (y1 - y0);
    let mut svg = String::new();
    frame(&mut svg, title, x, &ys.join(" / "), y0, y1);
    if numeric_x {
        for k in 0..=4 {
            let v = x0 + (x1 - x0) * k as f64 / 4.0;
            let _ = writeln!(svg, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, sx(v), H - PAD + 16.0, crate::eval::fmt_sig(v, 3));
        }
    } else {
        for c in &cats {
            let _ = writeln!(svg, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, sx(xpos(c)), H - PAD + 16.0, esc(c));
        }
    }
    let mut series = 0;
    for g in &groups {
        for (k, &i) in yi.iter().enumerate() {
            let pts: Vec<String> = t
                .rows
                .iter()
                .zip(&xs)
                .filter(|(r, _)| gi.is_none_or(|gi| &r[gi] == g))
                .map(|(r, xv)| format!("{:.2},{:.2}", sx(*xv), sy(r[i].parse().unwrap_or(0.0))))
                .collect();
            let color = COLORS[series % COLORS.len()];
            let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
            let name = if g.is_empty() { ys[k].to_string() } else { format!("{g} {}", ys[k]) };
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
                W - PAD - 110.0,
                PAD + 16.0 * series as f64,
                esc(&name)
            );
            series += 1;
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Bar chart of a `bin_lo,bin_hi,count` histogram table.
pub fn histogram_chart(t: &Table, title: &str) -> Result<String, String> {
    let (lo, hi, ci) = (t.column("bin_lo")?, t.column("bin_hi")?, t.column("count")?);
    let parse = |s: &str| s.parse::<f64>().map_err(|_| format!("non-numeric value '{s}'"));
    let mut bars = Vec::new();
    for r in &t.rows {
        bars.push((parse(&r[lo])?, parse(&r[hi])?, parse(&r[ci])?));
    }
    let (y0, y1) = y_range(bars.iter().map(|b| b.2));
    let sx = |v: f64| PAD + (W - 2.0 * PAD) * v;
    let sy = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - y0) / (y1 - y0);
    let mut svg = String::new();
    frame(&mut svg, title, "IoU", "count", y0, y1);
    for (a, b, c) in &bars {
        let _ = writeln!(
            svg,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#1f77b4" stroke="white"/>"##,
            sx(*a),
            sy(*c),
            sx(*b) - sx(*a),
            sy(y0) - sy(*c)
        );
    }
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, sx(v), H - PAD + 16.0, v);
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
