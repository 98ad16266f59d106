//! SVG figures regenerated from persisted results: running average accuracy
//! over training, and average accuracy per memory size.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use plotters::prelude::*;

use cil_core::trainer::read_epoch_log;

use crate::grid::{find_dirs_with, group_results, read_cell_results, CellResult};

const EPOCH_LOG: &str = "epoch_log.csv";

fn palette(i: usize) -> RGBColor {
    const COLORS: [RGBColor; 8] = [
        RGBColor(31, 119, 180),
        RGBColor(255, 127, 14),
        RGBColor(44, 160, 44),
        RGBColor(214, 39, 40),
        RGBColor(148, 103, 189),
        RGBColor(140, 86, 75),
        RGBColor(227, 119, 194),
        RGBColor(127, 127, 127),
    ];
    COLORS[i % COLORS.len()]
}

fn config_label(r: &CellResult) -> String {
    let (s, f, p, m) = r.group();
    format!("{s} feat={f} pred={p} M={m}")
}

/// Averages the running-accuracy curve of each configuration over its seeds.
fn trend_series(paths: &[PathBuf]) -> Result<Vec<(String, Vec<(f64, f64)>)>> {
    let dirs = find_dirs_with(paths, EPOCH_LOG)?;
    if dirs.is_empty() {
        bail!("no {EPOCH_LOG} found in the given results");
    }
    let mut curves: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    for dir in &dirs {
        let label = match read_cell_results(std::slice::from_ref(dir)) {
            Ok(r) => config_label(&r[0]),
            Err(_) => dir.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
        };
        let log = read_epoch_log(dir.join(EPOCH_LOG))?;
        if log.is_empty() {
            bail!("{} has no epochs", dir.join(EPOCH_LOG).display());
        }
        let ys: Vec<f64> = log.iter().map(|r| r.running_avg_acc).collect();
        match curves.iter_mut().find(|(l, _)| *l == label) {
            Some((_, runs)) => runs.push(ys),
            None => curves.push((label, vec![ys])),
        }
    }
    Ok(curves
        .into_iter()
        .map(|(label, runs)| {
            let len = runs.iter().map(Vec::len).min().unwrap_or(0);
            let points = (0..len)
                .map(|e| {
                    let y = runs.iter().map(|r| r[e]).sum::<f64>() / runs.len() as f64;
                    ((e + 1) as f64, y)
                })
                .collect();
            (label, points)
        })
        .collect())
}

/// One curve per configuration: running average accuracy against the global
/// epoch index.
pub fn plot_trend(paths: &[PathBuf], out: &Path) -> Result<PathBuf> {
    let series = trend_series(paths)?;
    let x_max = series.iter().map(|(_, p)| p.len()).max().unwrap_or(1) as f64;
    std::fs::create_dir_all(out)?;
    let file = out.join("trend.svg");
    {
        let root = SVGBackend::new(&file, (900, 560)).into_drawing_area();
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("Average accuracy during training", ("sans-serif", 22))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(56)
            .build_cartesian_2d(1.0..x_max.max(2.0), 0.0..1.0)?;
        chart
            .configure_mesh()
            .x_desc("epoch")
            .y_desc("avg accuracy")
            .draw()?;
        for (i, (label, points)) in series.iter().enumerate() {
            let color = palette(i);
            chart
                .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))?
                .label(label.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK)
            .position(SeriesLabelPosition::LowerLeft)
            .draw()?;
        root.present()?;
    }
    Ok(file)
}

/// Grouped bars: one group per memory size, one bar per strategy/KD
/// configuration, height = mean avg accuracy over seeds.
pub fn plot_ablation(paths: &[PathBuf], out: &Path) -> Result<PathBuf> {
    let results = read_cell_results(paths)?;
    let mut memories: Vec<usize> = results.iter().map(|r| r.memory).collect();
    memories.sort_unstable();
    memories.dedup();
    let mut configs: Vec<String> = Vec::new();
    let mut bars: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for ((s, f, p, m), members) in group_results(&results) {
        let label = format!("{s} feat={f} pred={p}");
        let ci = match configs.iter().position(|c| *c == label) {
            Some(i) => i,
            None => {
                configs.push(label);
                configs.len() - 1
            }
        };
        let mi = memories.binary_search(&m).expect("memory listed");
        let mean = members.iter().map(|r| r.avg_acc).sum::<f64>() / members.len() as f64;
        bars.insert((mi, ci), mean);
    }

    std::fs::create_dir_all(out)?;
    let file = out.join("ablation.svg");
    {
        let root = SVGBackend::new(&file, (900, 560)).into_drawing_area();
        root.fill(&WHITE)?;
        let n_groups = memories.len() as f64;
        let mut chart = ChartBuilder::on(&root)
            .caption("Average accuracy per memory size", ("sans-serif", 22))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(56)
            .build_cartesian_2d(0.0..n_groups, 0.0..1.0)?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(0)
            .x_desc("memory size")
            .y_desc("avg accuracy")
            .draw()?;
        chart.draw_series(memories.iter().enumerate().map(|(mi, m)| {
            Text::new(
                format!("M={m}"),
                (mi as f64 + 0.45, 0.97),
                ("sans-serif", 16).into_font().color(&BLACK),
            )
        }))?;
        let width = 0.8 / configs.len() as f64;
        for (ci, label) in configs.iter().enumerate() {
            let color = palette(ci);
            let rects: Vec<_> = bars
                .iter()
                .filter(|((_, c), _)| *c == ci)
                .map(|(&(mi, _), &v)| {
                    let x0 = mi as f64 + 0.1 + ci as f64 * width;
                    Rectangle::new([(x0, 0.0), (x0 + width * 0.9, v)], color.filled())
                })
                .collect();
            chart
                .draw_series(rects)?
                .label(label.as_str())
                .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK)
            .position(SeriesLabelPosition::UpperRight)
            .draw()?;
        root.present()?;
    }
    Ok(file)
}
