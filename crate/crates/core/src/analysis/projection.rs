//! 2-D multidimensional scaling of embeddings, with CSV and SVG export.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::router::kmeans::count_distinct;
use crate::router::smacof::{distance_matrix, euclidean, smacof};

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet {
    pub coords: Vec<[f64; 2]>,
    pub labels: Vec<String>,
    /// Normalized stress of the final configuration.
    pub stress: f64,
}

/// SMACOF projection of `points` to two dimensions.
pub fn mds_project_2d(points: &[Vec<f64>], labels: &[String]) -> Result<ProjectionSet> {
    if points.len() != labels.len() {
        return Err(Error::Pairing {
            left: points.len(),
            right: labels.len(),
        });
    }
    if points.len() < 3 {
        return Err(Error::Degenerate(format!(
            "need at least 3 points, got {}",
            points.len()
        )));
    }
    if count_distinct(points) < 2 {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    let emb = smacof(&distance_matrix(points), 2)?;
    Ok(ProjectionSet {
        coords: emb.coords.iter().map(|c| [c[0], c[1]]).collect(),
        labels: labels.to_vec(),
        stress: emb.stress,
    })
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

impl ProjectionSet {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,label\n");
        for (c, l) in self.coords.iter().zip(&self.labels) {
            let _ = writeln!(out, "{},{},{}", c[0], c[1], l);
        }
        out
    }

    /// Scatter plot, one color per label, with a legend.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (640.0, 480.0, 40.0);
        let xs = self.coords.iter().map(|c| c[0]);
        let ys = self.coords.iter().map(|c| c[1]);
        let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
            (a.min(x), b.max(x))
        });
        let (y0, y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| {
            (a.min(y), b.max(y))
        });
        let sx = (w - 2.0 * pad) / (x1 - x0).max(1e-12);
        let sy = (h - 2.0 * pad) / (y1 - y0).max(1e-12);
        let colors: BTreeMap<&str, &str> = {
            let mut names: Vec<&str> = self.labels.iter().map(String::as_str).collect();
            names.sort_unstable();
            names.dedup();
            names
                .into_iter()
                .enumerate()
                .map(|(i, l)| (l, PALETTE[i % PALETTE.len()]))
                .collect()
        };
        let mut out = format!(
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
        );
        out.push('\n');
        let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        for (c, l) in self.coords.iter().zip(&self.labels) {
            let px = pad + (c[0] - x0) * sx;
            let py = h - pad - (c[1] - y0) * sy;
            let _ = writeln!(
                out,
                r#"<circle cx="{px:.2}" cy="{py:.2}" r="3" fill="{}" fill-opacity="0.7"/>"#,
                colors[l.as_str()]
            );
        }
        for (i, (l, color)) in colors.iter().enumerate() {
            let y = 16.0 + 16.0 * i as f64;
            let _ = writeln!(
                out,
                r#"<rect x="8" y="{}" width="10" height="10" fill="{color}"/>"#,
                y - 9.0
            );
            let _ = writeln!(
                out,
                r#"<text x="22" y="{y}" font-size="12" font-family="sans-serif">{}</text>"#,
                escape(l)
            );
        }
        out.push_str("</svg>\n");
        out
    }

    /// Mean distance between label centroids, and mean distance of points
    /// to their own label's centroid.
    pub fn separation(&self) -> (f64, f64) {
        let mut groups: BTreeMap<&str, Vec<[f64; 2]>> = BTreeMap::new();
        for (c, l) in self.coords.iter().zip(&self.labels) {
            groups.entry(l).or_default().push(*c);
        }
        let centroids: Vec<Vec<f64>> = groups
            .values()
            .map(|g| {
                let n = g.len() as f64;
                vec![
                    g.iter().map(|c| c[0]).sum::<f64>() / n,
                    g.iter().map(|c| c[1]).sum::<f64>() / n,
                ]
            })
            .collect();
        let mut within = 0.0;
        for (g, c) in groups.values().zip(&centroids) {
            within += g.iter().map(|p| euclidean(p, c)).sum::<f64>();
        }
        within /= self.coords.len() as f64;
        let mut between = 0.0;
        let mut pairs = 0;
        for i in 0..centroids.len() {
            for j in i + 1..centroids.len() {
                between += euclidean(&centroids[i], &centroids[j]);
                pairs += 1;
            }
        }
        (
            if pairs > 0 {
                between / pairs as f64
            } else {
                0.0
            },
            within,
        )
    }
}
