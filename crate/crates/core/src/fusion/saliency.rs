//! Attention-based saliency maps projected onto input views.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::diff::ResamplePlan;
use crate::error::{Error, Result};

use super::AttentionRecord;

/// Projects `samples x features` data (row-major, `features` per row)
/// onto its first principal component. The sign is chosen so the
/// projection correlates positively with the per-sample feature mean.
pub fn first_principal_projection(data: &[f64], features: usize) -> Vec<f64> {
    let n = data.len() / features;
    if n == 0 {
        return Vec::new();
    }
    let m = DMatrix::from_row_slice(n, features, data);
    let mean = m.row_mean();
    let centered = DMatrix::from_fn(n, features, |i, j| m[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / n.max(1) as f64;
    let eig = SymmetricEigen::new(cov);
    let top = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let v = eig.eigenvectors.column(top);
    let mut proj: Vec<f64> = (0..n).map(|i| centered.row(i).dot(&v.transpose())).collect();
    let row_means: Vec<f64> = (0..n).map(|i| m.row(i).mean()).collect();
    let mu = row_means.iter().sum::<f64>() / n as f64;
    let corr: f64 = proj.iter().zip(&row_means).map(|(p, r)| p * (r - mu)).sum();
    if corr < 0.0 {
        proj.iter_mut().for_each(|p| *p = -*p);
    }
    proj
}

fn min_max_normalize(v: &mut [f64]) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 1e-12 * hi.abs().max(lo.abs()).max(1e-300)) {
        v.iter_mut().for_each(|x| *x = 0.0);
    } else {
        v.iter_mut().for_each(|x| *x = ((*x - lo) / range).clamp(0.0, 1.0));
    }
}

/// Heat map `[out_h * out_w]` in `[0, 1]` of where the `probe` queries
/// looked inside `(view_id, time)`: probe columns are averaged, the head
/// axis is reduced by its first principal component, and the result is
/// upsampled bilinearly to the view resolution.
pub fn extract_saliency(
    rec: &AttentionRecord,
    probe: &[usize],
    view_id: &str,
    time: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<f64>> {
    if probe.is_empty() {
        return Err(Error::EmptyProbe);
    }
    if let Some(&bad) = probe.iter().find(|&&q| q >= rec.n_bev) {
        return Err(Error::IndexOutOfRange {
            what: "probe query",
            index: bad,
            len: rec.n_bev,
        });
    }
    let span = rec
        .span(view_id, time)
        .ok_or_else(|| Error::MissingCalibration(view_id.to_string()))?;
    let (gh, gw) = span.grid;
    let len = gh * gw;
    // samples = key positions, features = heads
    let mut data = vec![0.0; len * rec.n_heads];
    for head in 0..rec.n_heads {
        for &q in probe {
            for l in 0..len {
                data[l * rec.n_heads + head] += rec.weight(head, q, span.offset + l);
            }
        }
    }
    data.iter_mut().for_each(|v| *v /= probe.len() as f64);
    let proj = first_principal_projection(&data, rec.n_heads);
    let mut up = ResamplePlan::bilinear(gh, gw, out_h, out_w).apply_slice(&proj, 1);
    min_max_normalize(&mut up);
    Ok(up)
}
