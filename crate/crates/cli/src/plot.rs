//! Static bar-chart emission from report files. Rendering is fully
//! deterministic: fixed geometry, fixed palette, no timestamps, so
//! re-plotting unchanged reports reproduces the files byte for byte.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use cahqp_core::pipeline::{ablation_grid, CycleReport};

use crate::font::{glyph, text_width, ADVANCE, GLYPH_H};
use crate::{Failure, PlotArgs};

type Rgb = [u8; 3];

const BLACK: Rgb = [32, 32, 32];
const GRID: Rgb = [210, 210, 210];
const PSEUDO: Rgb = [70, 110, 180];
const EDGE: Rgb = [225, 145, 60];

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<u8>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Canvas { w, h, px: vec![255; w * h * 3] }
    }

    fn set(&mut self, x: usize, y: usize, c: Rgb) {
        if x < self.w && y < self.h {
            let i = (y * self.w + x) * 3;
            self.px[i..i + 3].copy_from_slice(&c);
        }
    }

    fn fill_rect(&mut self, x: usize, y: usize, w: usize, h: usize, c: Rgb) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.set(xx, yy, c);
            }
        }
    }

    fn hline(&mut self, x0: usize, x1: usize, y: usize, c: Rgb) {
        for x in x0..=x1 {
            self.set(x, y, c);
        }
    }

    fn vline(&mut self, x: usize, y0: usize, y1: usize, c: Rgb) {
        for y in y0..=y1 {
            self.set(x, y, c);
        }
    }

    fn text(&mut self, x: usize, y: usize, s: &str, c: Rgb) {
        for (i, ch) in s.chars().enumerate() {
            let g = glyph(ch);
            for (gy, row) in g.iter().enumerate() {
                for gx in 0..5 {
                    if row & (1 << (4 - gx)) != 0 {
                        self.set(x + i * ADVANCE + gx, y + gy, c);
                    }
                }
            }
        }
    }

    fn text_centered(&mut self, cx: usize, y: usize, s: &str, c: Rgb) {
        let w = text_width(s);
        self.text(cx.saturating_sub(w / 2), y, s, c);
    }

    fn save(&self, path: &Path) -> Result<(), Failure> {
        let file = File::create(path)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.w as u32, self.h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Failure::Runtime(e.to_string()))?;
        writer.write_image_data(&self.px).map_err(|e| Failure::Runtime(e.to_string()))?;
        Ok(())
    }
}

/// A y axis fixed to mAP's 0..100 range with gridlines every 20.
struct Axes {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

impl Axes {
    fn draw(&self, c: &mut Canvas) {
        for tick in [0, 20, 40, 60, 80, 100] {
            let y = self.y_of(tick as f64);
            c.hline(self.x0, self.x1, y, if tick == 0 { BLACK } else { GRID });
            let label = tick.to_string();
            c.text(self.x0.saturating_sub(text_width(&label) + 4), y.saturating_sub(3), &label, BLACK);
        }
        c.vline(self.x0, self.y0, self.y1, BLACK);
    }

    fn y_of(&self, v: f64) -> usize {
        let span = (self.y1 - self.y0) as f64;
        self.y1 - (v.clamp(0.0, 100.0) / 100.0 * span).round() as usize
    }

    fn bar(&self, c: &mut Canvas, x: usize, w: usize, v: f64, color: Rgb) {
        let top = self.y_of(v);
        if top < self.y1 {
            c.fill_rect(x, top, w, self.y1 - top, color);
        }
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn fit_label(s: &str, max_px: usize) -> String {
    let max_chars = (max_px / ADVANCE).max(1);
    if s.chars().count() <= max_chars {
        s.to_string()
    } else {
        s.chars().take(max_chars.saturating_sub(1)).chain(['.']).collect()
    }
}

/// Grouped bars per stream (pseudo-label and edge mAP, seed means) plus a
/// trailing Mean group.
fn stream_chart(reports: &[CycleReport]) -> Canvas {
    let mut streams: Vec<String> = Vec::new();
    for r in reports {
        if !streams.contains(&r.stream) {
            streams.push(r.stream.clone());
        }
    }
    let per_stream = |s: &str, get: fn(&CycleReport) -> f64| -> f64 {
        mean(&reports.iter().filter(|r| r.stream == s).map(get).collect::<Vec<_>>())
    };
    let mut groups: Vec<(String, f64, f64)> = streams
        .iter()
        .map(|s| {
            (s.clone(), per_stream(s, |r| r.pseudo_label_map), per_stream(s, |r| r.edge_map))
        })
        .collect();
    let pseudo_mean = mean(&groups.iter().map(|g| g.1).collect::<Vec<_>>());
    let edge_mean = mean(&groups.iter().map(|g| g.2).collect::<Vec<_>>());
    groups.push(("Mean".into(), pseudo_mean, edge_mean));

    let group_w = 84;
    let (ml, mr, mt, mb) = (46, 14, 34, 30);
    let mut c = Canvas::new(ml + groups.len() * group_w + mr, mt + 220 + mb);
    let axes = Axes { x0: ml, x1: c.w - mr, y0: mt, y1: mt + 220 };
    c.text(ml, 8, "MAP BY STREAM (SEED MEANS)", BLACK);
    let legend_x = c.w - mr - text_width("PSEUDO") - text_width("EDGE") - 30;
    c.fill_rect(legend_x, 8, 7, 7, PSEUDO);
    c.text(legend_x + 10, 8, "PSEUDO", BLACK);
    let ex = legend_x + 10 + text_width("PSEUDO") + 10;
    c.fill_rect(ex, 8, 7, 7, EDGE);
    c.text(ex + 10, 8, "EDGE", BLACK);
    axes.draw(&mut c);

    let bar_w = 26;
    for (i, (tag, pseudo, edge)) in groups.iter().enumerate() {
        let gx = ml + i * group_w;
        let center = gx + group_w / 2;
        axes.bar(&mut c, center - bar_w - 2, bar_w, *pseudo, PSEUDO);
        axes.bar(&mut c, center + 2, bar_w, *edge, EDGE);
        c.text_centered(center, axes.y1 + 6, &fit_label(tag, group_w - 6), BLACK);
    }
    c
}

/// One panel per metric, five bars in the standard component order.
fn ablation_chart(reports: &[CycleReport]) -> Canvas {
    let cells: Vec<(String, f64, f64)> = ablation_grid()
        .iter()
        .map(|flags| {
            let rs: Vec<&CycleReport> = reports.iter().filter(|r| r.flags == *flags).collect();
            (
                flags.label(),
                mean(&rs.iter().map(|r| r.pseudo_label_map).collect::<Vec<_>>()),
                mean(&rs.iter().map(|r| r.edge_map).collect::<Vec<_>>()),
            )
        })
        .collect();

    let slot = 76;
    let panel_w = 46 + cells.len() * slot + 10;
    let (mt, mb) = (34, 30);
    let mut c = Canvas::new(panel_w * 2 + 20, mt + 220 + mb);
    for (panel, (title, color)) in
        [("PSEUDO-LABEL MAP", PSEUDO), ("EDGE MAP", EDGE)].iter().enumerate()
    {
        let px0 = panel * (panel_w + 20);
        let axes = Axes { x0: px0 + 46, x1: px0 + panel_w - 10, y0: mt, y1: mt + 220 };
        c.text(px0 + 46, 8, title, BLACK);
        axes.draw(&mut c);
        for (i, (label, pseudo, edge)) in cells.iter().enumerate() {
            let v = if panel == 0 { *pseudo } else { *edge };
            let x = px0 + 46 + i * slot + slot / 2;
            axes.bar(&mut c, x - 16, 32, v, *color);
            c.text_centered(x, axes.y_of(v).saturating_sub(GLYPH_H + 2), &format!("{v:.1}"), BLACK);
            c.text_centered(x, axes.y1 + 6, &fit_label(label, slot - 4), BLACK);
        }
    }
    c
}

fn read_reports(path: &Path) -> Result<Option<Vec<CycleReport>>, Failure> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path)?;
    let mut reports = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: CycleReport = serde_json::from_str(line).map_err(|e| {
            Failure::Runtime(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        reports.push(r);
    }
    Ok(if reports.is_empty() { None } else { Some(reports) })
}

pub fn cmd_plot(args: PlotArgs) -> Result<(), Failure> {
    let out: PathBuf = args.out.clone().unwrap_or_else(|| args.dir.clone());
    let runs = read_reports(&args.dir.join("reports.jsonl"))?;
    let ablation = read_reports(&args.dir.join("ablation.jsonl"))?;
    if runs.is_none() && ablation.is_none() {
        return Err(Failure::Runtime(format!(
            "no report records under {}",
            args.dir.display()
        )));
    }
    std::fs::create_dir_all(&out)?;
    if let Some(reports) = runs {
        let path = out.join("map_bars.png");
        stream_chart(&reports).save(&path)?;
        println!("wrote {}", path.display());
    }
    if let Some(reports) = ablation {
        let path = out.join("ablation_bars.png");
        ablation_chart(&reports).save(&path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
