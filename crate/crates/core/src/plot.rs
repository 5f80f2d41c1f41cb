//! Static SVG charts for sweep results.

use std::path::Path;

use plotters::prelude::*;

/// One named curve; `points[i]` belongs to the i-th x label.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<f64>,
}

/// Draws every series against categorical x labels (sweep values need not be
/// numeric or evenly spaced).
pub fn line_chart(path: &Path, title: &str, x_name: &str, labels: &[String], series: &[Series]) -> Result<(), String> {
    if labels.is_empty() {
        return Err("nothing to plot".into());
    }
    if let Some(s) = series.iter().find(|s| s.points.len() != labels.len()) {
        return Err(format!("series {} has {} points for {} labels", s.name, s.points.len(), labels.len()));
    }
    let top = series.iter().flat_map(|s| s.points.iter().copied()).fold(0.0_f64, f64::max);
    let y_max = if top > 0.0 { (top * 1.1).min(1.0).max(top) } else { 1.0 };
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    let e = |err: DrawingAreaErrorKind<std::io::Error>| err.to_string();
    root.fill(&WHITE).map_err(e)?;
    let last = labels.len() - 1;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(-0.25f64..last as f64 + 0.25, 0.0..y_max)
        .map_err(e)?;
    chart
        .configure_mesh()
        .x_desc(x_name)
        .y_desc("metric")
        .x_labels(labels.len())
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 {
                labels.get(i as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .draw()
        .map_err(e)?;
    for (k, s) in series.iter().enumerate() {
        let color = Palette99::pick(k).to_rgba();
        let pts: Vec<(f64, f64)> = s.points.iter().enumerate().map(|(i, &v)| (i as f64, v)).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(e)?
            .label(s.name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        chart.draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled()))).map_err(e)?;
    }
    chart.configure_series_labels().border_style(BLACK).background_style(WHITE.mix(0.8)).draw().map_err(e)?;
    root.present().map_err(e)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_an_svg_with_every_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.svg");
        let labels: Vec<String> = ["1", "3", "5"].map(String::from).to_vec();
        let series = [Series { name: "HR@10".into(), points: vec![0.2, 0.4, 0.3] }, Series { name: "NDCG@10".into(), points: vec![0.1, 0.2, 0.15] }];
        line_chart(&path, "sweep", "m", &labels, &series).unwrap();
        let svg = std::fs::read_to_string(&path).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("HR@10") && svg.contains("NDCG@10"));
    }

    #[test]
    fn mismatched_series_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let s = [Series { name: "x".into(), points: vec![0.1] }];
        assert!(line_chart(&dir.path().join("a.svg"), "t", "m", &["1".into(), "2".into()], &s).is_err());
    }
}
