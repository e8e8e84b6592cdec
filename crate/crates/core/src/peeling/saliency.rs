use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{PeelError, PeelTrace};
use crate::graphs::MultiViewSample;

pub const SALIENCY_SCHEMA_VERSION: u32 = 1;

/// Per-node causal scores of one sample, read from the gates of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub schema_version: u32,
    pub sample_id: String,
    /// 1-based layer index.
    pub layer: usize,
    pub views: BTreeMap<String, Vec<f64>>,
}

/// Saliency of every sample in the trace at `layer` (1-based).
pub fn extract_saliency(trace: &PeelTrace, layer: usize) -> Result<Vec<SaliencyMap>, PeelError> {
    let depth = trace.alphas.len();
    if layer == 0 || layer > depth {
        return Err(PeelError::LayerOutOfRange { layer, depth });
    }
    let per_view = &trace.alphas[layer - 1];
    Ok(trace
        .sample_ids
        .iter()
        .enumerate()
        .map(|(i, id)| SaliencyMap {
            schema_version: SALIENCY_SCHEMA_VERSION,
            sample_id: id.clone(),
            layer,
            views: trace
                .views
                .iter()
                .zip(per_view)
                .map(|(v, a)| (v.clone(), a[i].clone()))
                .collect(),
        })
        .collect())
}

pub fn saliency_json(map: &SaliencyMap) -> String {
    serde_json::to_string(map).expect("plain data serializes")
}

const SIZE: f64 = 400.0;
const MARGIN: f64 = 30.0;

/// Diverging blue–white–red scale anchored at π = 0.5.
fn color(pi: f64) -> String {
    let pi = pi.clamp(0.0, 1.0);
    let (lo, hi) = ([59.0, 76.0, 192.0], [180.0, 4.0, 38.0]);
    let (end, t) = if pi < 0.5 { (lo, 1.0 - 2.0 * pi) } else { (hi, 2.0 * pi - 1.0) };
    let c: Vec<u8> = end.iter().map(|&e| (255.0 + (e - 255.0) * t).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn id_seed(id: &str) -> u64 {
    let h = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

/// Fruchterman–Reingold layout seeded by the sample id.
fn force_layout(n: usize, edges: &[(usize, usize)], seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    if n < 2 {
        return p;
    }
    let k = (4.0 / n as f64).sqrt();
    let mut temp = 0.2;
    for _ in 0..100 {
        let mut disp = vec![[0.0f64; 2]; n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let d = [p[i][0] - p[j][0], p[i][1] - p[j][1]];
                let dist = (d[0] * d[0] + d[1] * d[1]).sqrt().max(1e-6);
                let f = k * k / dist;
                disp[i][0] += d[0] / dist * f;
                disp[i][1] += d[1] / dist * f;
            }
        }
        for &(a, b) in edges {
            let d = [p[a][0] - p[b][0], p[a][1] - p[b][1]];
            let dist = (d[0] * d[0] + d[1] * d[1]).sqrt().max(1e-6);
            let f = dist * dist / k;
            disp[a][0] -= d[0] / dist * f;
            disp[a][1] -= d[1] / dist * f;
        }
        for (pi, di) in p.iter_mut().zip(&disp) {
            let len = (di[0] * di[0] + di[1] * di[1]).sqrt().max(1e-12);
            let step = len.min(temp);
            pi[0] += di[0] / len * step;
            pi[1] += di[1] / len * step;
        }
        temp *= 0.96;
    }
    p
}

fn fit_to_canvas(p: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for q in p {
        for k in 0..2 {
            lo[k] = lo[k].min(q[k]);
            hi[k] = hi[k].max(q[k]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let s = (SIZE - 2.0 * MARGIN) / span;
    p.iter()
        .map(|q| [MARGIN + (q[0] - lo[0]) * s, MARGIN + (q[1] - lo[1]) * s])
        .collect()
}

/// SVG of one view with nodes colored by π. Geometry views use their stored
/// positions projected onto the first two axes.
pub fn render_svg(map: &SaliencyMap, sample: &MultiViewSample, view: &str) -> Result<String, PeelError> {
    let missing = || PeelError::MissingView {
        sample: sample.id.clone(),
        view: view.to_string(),
    };
    let g = sample.view(view).ok_or_else(missing)?;
    let pi = map.views.get(view).ok_or_else(missing)?;
    let edges = g.undirected_edges();
    let raw = match &g.positions {
        Some(pos) => pos.iter().map(|p| [p[0], p[1]]).collect(),
        None => force_layout(g.num_nodes(), &edges, id_seed(&sample.id)),
    };
    let xy = fit_to_canvas(&raw);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(
        s,
        r#"<title>{} view {} layer {}</title>"#,
        xml_escape(&sample.id),
        xml_escape(view),
        map.layer
    );
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    for (a, b) in edges {
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#888888" stroke-width="1.5"/>"##,
            xy[a][0], xy[a][1], xy[b][0], xy[b][1]
        );
    }
    for (i, (p, v)) in xy.iter().zip(pi).enumerate() {
        let _ = writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="9" fill="{}" stroke="#333333"><title>node {i}: {v:.4}</title></circle>"##,
            p[0],
            p[1],
            color(*v)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
