//! Accuracy evaluation: per-condition RMSE tables, per-axis breakdowns,
//! trajectory exports, and saliency maps.

use crate::data::{removal_indices, ConfigTag, Episode, FeatureGroup, NormStats, STATE_DIM};
use crate::error::{Error, Result};
use crate::imgproc::{PipeSpec, SpaceTimeSpec};
use crate::nets::{Network, Variant, SEQ_LEN};
use crate::physics::PhysicsBaseline;
use crate::tensor::{Graph, Mode, Tensor};
use crate::trainer::{
    self, batch_images, batch_labels, batch_states, preprocess_clip, ClipData, TRIM_BACK,
    TRIM_FRONT,
};
use std::collections::BTreeMap;
use std::path::Path;

/// One evaluated tick: model output against the ground-truth label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub tick: usize,
    pub pred: [f64; 3],
    pub gt: [f64; 3],
}

/// Root-mean-square error per axis plus their average, in newtons.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AxisErrors {
    pub axes: [f64; 3],
    pub mean: f64,
    pub count: usize,
}

/// RMSE over a set of predictions. Ticks whose ground-truth magnitude
/// exceeds `exclude_above` newtons are dropped first. Returns `None` when
/// nothing survives the filter.
pub fn rmse(preds: &[Prediction], exclude_above: Option<f64>) -> Option<AxisErrors> {
    let mut se = [0.0; 3];
    let mut count = 0usize;
    for p in preds {
        let mag = (p.gt[0] * p.gt[0] + p.gt[1] * p.gt[1] + p.gt[2] * p.gt[2]).sqrt();
        if exclude_above.is_some_and(|lim| mag > lim) {
            continue;
        }
        for a in 0..3 {
            se[a] += (p.pred[a] - p.gt[a]).powi(2);
        }
        count += 1;
    }
    if count == 0 {
        return None;
    }
    let axes = [
        (se[0] / count as f64).sqrt(),
        (se[1] / count as f64).sqrt(),
        (se[2] / count as f64).sqrt(),
    ];
    Some(AxisErrors {
        axes,
        mean: (axes[0] + axes[1] + axes[2]) / 3.0,
        count,
    })
}

/// A force estimator under evaluation: a trained network (optionally with
/// a feature-removal mask) or the model-based baseline.
pub enum Estimator {
    Net {
        name: String,
        net: Network,
        stats: NormStats,
        label_stats: NormStats,
        mask: Option<Vec<usize>>,
    },
    Physics {
        name: String,
        baseline: PhysicsBaseline,
    },
}

impl Estimator {
    pub fn name(&self) -> &str {
        match self {
            Estimator::Net { name, .. } | Estimator::Physics { name, .. } => name,
        }
    }

    pub fn needs_images(&self) -> bool {
        match self {
            Estimator::Net { net, .. } => net.variant().uses_images(),
            Estimator::Physics { .. } => false,
        }
    }

    /// Load a trained network checkpoint along with its stored
    /// normalization statistics.
    pub fn from_checkpoint(name: &str, path: &Path) -> Result<Estimator> {
        let (net, extra) = Network::load(path)?;
        let find = |key: &str| -> Result<Vec<f64>> {
            extra
                .iter()
                .find(|(n, _, _)| n == key)
                .map(|(_, _, d)| d.clone())
                .ok_or_else(|| {
                    Error::Checkpoint(format!("{} lacks a '{key}' tensor", path.display()))
                })
        };
        let stats = NormStats::new(find("state_mean")?, find("state_std")?)?;
        let label_stats = NormStats::new(find("label_mean")?, find("label_std")?)?;
        // a checkpoint trained with features removed keeps them removed
        let mask = match extra
            .iter()
            .find(|(n, _, _)| n == "ablate_code")
            .map(|(_, _, d)| d[0] as i64)
        {
            Some(1) => Some(removal_indices(FeatureGroup::Kinematic)),
            Some(2) => Some(removal_indices(FeatureGroup::Force)),
            _ => None,
        };
        Ok(Estimator::Net {
            name: name.to_string(),
            net,
            stats,
            label_stats,
            mask,
        })
    }

    pub fn with_mask(self, mask: Vec<usize>) -> Result<Estimator> {
        match self {
            Estimator::Net {
                name,
                net,
                stats,
                label_stats,
                ..
            } => {
                if !net.variant().uses_state() {
                    return Err(Error::Usage(
                        "the vision-only variant has no state features to remove".into(),
                    ));
                }
                Ok(Estimator::Net {
                    name,
                    net,
                    stats,
                    label_stats,
                    mask: Some(mask),
                })
            }
            Estimator::Physics { .. } => Err(Error::Usage(
                "feature removal applies to network estimators only".into(),
            )),
        }
    }

    /// Evaluate one episode over its trimmed tick range.
    pub fn predict(&mut self, ep: &Episode, pipe: &PipeSpec) -> Result<Vec<Prediction>> {
        let n = ep.len();
        if n <= TRIM_FRONT + TRIM_BACK {
            return Err(Error::Config(format!(
                "clip {} too short to evaluate",
                ep.dir.display()
            )));
        }
        match self {
            Estimator::Physics { baseline, .. } => {
                let est = baseline.estimate(ep)?;
                Ok((TRIM_FRONT..n - TRIM_BACK)
                    .map(|t| Prediction {
                        tick: t,
                        pred: est[t].force,
                        gt: ep.labels[t].f_gt,
                    })
                    .collect())
            }
            Estimator::Net {
                net,
                stats,
                label_stats,
                mask,
                ..
            } => {
                let clip = preprocess_clip(ep, stats, pipe, net.variant().uses_images())?;
                predict_clip(net, &clip, label_stats, mask.as_deref())
            }
        }
    }
}

/// Network predictions for one preprocessed clip over the trimmed range.
pub fn predict_clip(
    net: &mut Network,
    clip: &ClipData,
    label_stats: &NormStats,
    mask: Option<&[usize]>,
) -> Result<Vec<Prediction>> {
    let denorm = |v: f64, a: usize| v * label_stats.std[a] + label_stats.mean[a];
    let n = clip.states.len();
    let ticks: Vec<usize> = (TRIM_FRONT..n - TRIM_BACK).collect();
    let st = SpaceTimeSpec::default();
    let mut out = Vec::with_capacity(ticks.len());
    match net.variant() {
        Variant::Rnn => {
            let mut g = Graph::new();
            let encs = trainer::encode_clip(net, &mut g, clip)?;
            for &t in &ticks {
                if t + 1 < SEQ_LEN {
                    continue;
                }
                let window: Vec<_> = (t + 1 - SEQ_LEN..=t).map(|k| encs[k]).collect();
                let states: Vec<_> = (t + 1 - SEQ_LEN..=t)
                    .map(|k| {
                        let mut row = clip.states[k].to_vec();
                        if let Some(cols) = mask {
                            for &c in cols {
                                row[c] = 0.0;
                            }
                        }
                        g.leaf(Tensor::new(vec![1, STATE_DIM], row).expect("state row"))
                    })
                    .collect();
                let (id, _) = net.forward_sequence_encoded(&mut g, &window, &states)?;
                let v = &g.value(id).data;
                out.push(Prediction {
                    tick: t,
                    pred: [denorm(v[0], 0), denorm(v[1], 1), denorm(v[2], 2)],
                    gt: clip.labels[t],
                });
            }
        }
        _ => {
            for chunk in ticks.chunks(64) {
                let idx: Vec<(usize, usize)> = chunk.iter().map(|&t| (0, t)).collect();
                let clips = std::slice::from_ref(clip);
                let mut g = Graph::new();
                let images = if net.variant().uses_images() {
                    Some(g.leaf(batch_images(clips, &idx, &st)?))
                } else {
                    None
                };
                let states = if net.variant().uses_state() {
                    let mut t = batch_states(clips, &idx);
                    if let Some(cols) = mask {
                        for r in 0..idx.len() {
                            for &c in cols {
                                t.data[r * STATE_DIM + c] = 0.0;
                            }
                        }
                    }
                    Some(g.leaf(t))
                } else {
                    None
                };
                let (id, _) = net.forward(&mut g, images, states, Mode::Eval)?;
                let pred = g.value(id);
                let gts = batch_labels(clips, &idx);
                for (r, &t) in chunk.iter().enumerate() {
                    out.push(Prediction {
                        tick: t,
                        pred: [
                            denorm(pred.data[r * 3], 0),
                            denorm(pred.data[r * 3 + 1], 1),
                            denorm(pred.data[r * 3 + 2], 2),
                        ],
                        gt: [gts.data[r * 3], gts.data[r * 3 + 1], gts.data[r * 3 + 2]],
                    });
                }
            }
        }
    }
    Ok(out)
}

/// One estimator's results grouped by scene configuration. Each cell is
/// the average of its clips' per-clip RMSEs; the summary mean averages
/// the ten workspace/viewpoint columns, leaving the unseen conditions
/// reported separately.
#[derive(Debug, Clone)]
pub struct EstimatorRow {
    pub name: String,
    pub cells: BTreeMap<ConfigTag, AxisErrors>,
    pub mean_over_configs: Option<f64>,
}

fn average_clips(clips: &[AxisErrors]) -> AxisErrors {
    let n = clips.len() as f64;
    let mut axes = [0.0; 3];
    for c in clips {
        for a in 0..3 {
            axes[a] += c.axes[a] / n;
        }
    }
    AxisErrors {
        axes,
        mean: clips.iter().map(|c| c.mean).sum::<f64>() / n,
        count: clips.len(),
    }
}

/// Evaluate one estimator over a set of episodes: RMSE per clip, clips
/// averaged per configuration.
pub fn evaluate(
    est: &mut Estimator,
    episodes: &[Episode],
    pipe: &PipeSpec,
    exclude_above: Option<f64>,
) -> Result<EstimatorRow> {
    let mut by_tag: BTreeMap<ConfigTag, Vec<AxisErrors>> = BTreeMap::new();
    for ep in episodes {
        let preds = est.predict(ep, pipe)?;
        if let Some(err) = rmse(&preds, exclude_above) {
            by_tag.entry(ep.config).or_default().push(err);
        }
    }
    let cells: BTreeMap<ConfigTag, AxisErrors> = by_tag
        .into_iter()
        .map(|(tag, clips)| (tag, average_clips(&clips)))
        .collect();
    let config_means: Vec<f64> = ConfigTag::CONFIGS
        .iter()
        .filter_map(|t| cells.get(t).map(|e| e.mean))
        .collect();
    let mean_over_configs = if config_means.is_empty() {
        None
    } else {
        Some(config_means.iter().sum::<f64>() / config_means.len() as f64)
    };
    Ok(EstimatorRow {
        name: est.name().to_string(),
        cells,
        mean_over_configs,
    })
}

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

/// Summary table, one row per estimator, one column per scene
/// configuration plus a pooled mean. Conditions with no evaluated ticks
/// are left blank.
pub fn write_table_csv(path: &Path, rows: &[EstimatorRow]) -> Result<()> {
    let mut s = String::from("estimator");
    for tag in ConfigTag::ALL {
        s.push(',');
        s.push_str(tag.name());
    }
    s.push_str(",mean\n");
    for row in rows {
        s.push_str(&row.name);
        for tag in ConfigTag::ALL {
            s.push(',');
            if let Some(err) = row.cells.get(&tag) {
                s.push_str(&fmt(err.mean));
            }
        }
        s.push(',');
        if let Some(p) = row.mean_over_configs {
            s.push_str(&fmt(p));
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Long-form per-axis breakdown: estimator, condition, axis, rmse.
pub fn write_per_axis_csv(path: &Path, rows: &[EstimatorRow]) -> Result<()> {
    let mut s = String::from("estimator,condition,axis,rmse_newtons\n");
    for row in rows {
        for tag in ConfigTag::ALL {
            if let Some(err) = row.cells.get(&tag) {
                for (axis, label) in ["x", "y", "z"].iter().enumerate() {
                    s.push_str(&format!(
                        "{},{},{},{}\n",
                        row.name,
                        tag.name(),
                        label,
                        fmt(err.axes[axis])
                    ));
                }
            }
        }
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Ground truth and prediction side by side over the first `seconds` of
/// the trimmed range, for force-tracking plots.
pub fn export_trajectory(
    path: &Path,
    ep: &Episode,
    preds: &[Prediction],
    seconds: f64,
) -> Result<()> {
    let max_rows = (seconds * ep.rate_hz).round() as usize;
    let mut s = String::from("time_s,fx_gt,fy_gt,fz_gt,fx_pred,fy_pred,fz_pred\n");
    for p in preds.iter().take(max_rows) {
        s.push_str(&format!(
            "{:.4},{:.5},{:.5},{:.5},{:.5},{:.5},{:.5}\n",
            ep.timestamps[p.tick], p.gt[0], p.gt[1], p.gt[2], p.pred[0], p.pred[1], p.pred[2]
        ));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// A class-activation heat map normalized to [0, 1].
#[derive(Debug, Clone)]
pub struct CamMap {
    /// Coarse map at feature-grid resolution.
    pub coarse: (usize, usize, Vec<f64>),
    /// Bilinearly upsampled to the network input resolution.
    pub full: (usize, usize, Vec<f64>),
}

/// Gradient-weighted activation map of the backbone's final feature map.
/// The score is the squared magnitude of the predicted force, so the map
/// highlights regions that drive the force estimate.
pub fn grad_cam(net: &mut Network, stack: &Tensor, state: Option<&[f64]>) -> Result<CamMap> {
    if stack.shape.len() != 3 {
        return Err(Error::Shape(format!(
            "expected a [channels, height, width] stack, got {:?}",
            stack.shape
        )));
    }
    let (c, h, w) = (stack.shape[0], stack.shape[1], stack.shape[2]);
    let mut g = Graph::new();
    let img = g.leaf(Tensor::new(vec![1, c, h, w], stack.data.clone())?);
    let state_id = match state {
        Some(row) => Some(g.leaf(Tensor::new(vec![1, row.len()], row.to_vec())?)),
        None => None,
    };
    let (out, feat) = net.forward_with_feature(&mut g, img, state_id, Mode::Eval)?;
    let sq = g.mul(out, out)?;
    let score = g.mean_all(sq);
    g.backward(score)?;

    let fshape = g.shape(feat).to_vec();
    let (fc, fh, fw) = (fshape[1], fshape[2], fshape[3]);
    let acts = g.value(feat).data.clone();
    let grads = g.grad(feat).to_vec();
    let plane = fh * fw;

    let mut coarse = vec![0.0; plane];
    for ch in 0..fc {
        let alpha: f64 = grads[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64;
        for i in 0..plane {
            coarse[i] += alpha * acts[ch * plane + i];
        }
    }
    for v in &mut coarse {
        *v = v.max(0.0);
    }
    let lo = coarse.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = coarse.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        for v in &mut coarse {
            *v = (*v - lo) / (hi - lo);
        }
    }
    let full = bilinear_upsample(&coarse, fw, fh, w, h);
    Ok(CamMap {
        coarse: (fw, fh, coarse),
        full: (w, h, full),
    })
}

fn bilinear_upsample(src: &[f64], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f64> {
    let mut out = vec![0.0; dw * dh];
    for y in 0..dh {
        let fy = if dh > 1 {
            y as f64 * (sh - 1) as f64 / (dh - 1) as f64
        } else {
            0.0
        };
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = fy - y0 as f64;
        for x in 0..dw {
            let fx = if dw > 1 {
                x as f64 * (sw - 1) as f64 / (dw - 1) as f64
            } else {
                0.0
            };
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * sw + x0] * (1.0 - tx) + src[y0 * sw + x1] * tx;
            let bot = src[y1 * sw + x0] * (1.0 - tx) + src[y1 * sw + x1] * tx;
            out[y * dw + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Binary PGM (P5) of the upsampled map.
pub fn write_cam_pgm(path: &Path, cam: &CamMap) -> Result<()> {
    let (w, h, data) = &cam.full;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(
        data.iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// SVG heat overlay at feature-grid resolution: one translucent red cell
/// per feature-map location, opacity following activation strength.
pub fn write_cam_svg(path: &Path, cam: &CamMap, cell_px: usize) -> Result<()> {
    let (w, h, data) = &cam.coarse;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\">\n",
        w * cell_px,
        h * cell_px
    );
    s.push_str(&format!(
        "<rect width=\"{}\" height=\"{}\" fill=\"black\"/>\n",
        w * cell_px,
        h * cell_px
    ));
    for y in 0..*h {
        for x in 0..*w {
            let v = data[y * w + x];
            if v > 0.0 {
                s.push_str(&format!(
                    "<rect x=\"{}\" y=\"{}\" width=\"{cell_px}\" height=\"{cell_px}\" fill=\"rgb(255,{:.0},0)\" fill-opacity=\"{v:.3}\"/>\n",
                    x * cell_px,
                    y * cell_px,
                    (1.0 - v) * 200.0
                ));
            }
        }
    }
    s.push_str("</svg>\n");
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::Variant;

    fn pred(tick: usize, pred: [f64; 3], gt: [f64; 3]) -> Prediction {
        Prediction { tick, pred, gt }
    }

    #[test]
    fn rmse_matches_hand_computation() {
        // errors: x = (3, 0), y = (0, 4), z = (1, 1)
        let preds = vec![
            pred(0, [3.0, 0.0, 1.0], [0.0, 0.0, 0.0]),
            pred(1, [0.0, 4.0, 1.0], [0.0, 0.0, 0.0]),
        ];
        let e = rmse(&preds, None).unwrap();
        let rx = (9.0f64 / 2.0).sqrt();
        let ry = (16.0f64 / 2.0).sqrt();
        assert!((e.axes[0] - rx).abs() < 1e-12);
        assert!((e.axes[1] - ry).abs() < 1e-12);
        assert!((e.axes[2] - 1.0).abs() < 1e-12);
        assert!((e.mean - (rx + ry + 1.0) / 3.0).abs() < 1e-12);
        assert_eq!(e.count, 2);
    }

    #[test]
    fn exclusion_threshold_drops_large_forces() {
        let preds = vec![
            pred(0, [0.0; 3], [0.0, 0.0, 2.0]),
            pred(1, [0.0; 3], [0.0, 0.0, 7.0]), // magnitude 7 > 5
        ];
        let all = rmse(&preds, None).unwrap();
        let kept = rmse(&preds, Some(5.0)).unwrap();
        assert_eq!(all.count, 2);
        assert_eq!(kept.count, 1);
        assert!((kept.axes[2] - 2.0).abs() < 1e-12);
        assert!(rmse(&preds, Some(0.5)).is_none());
    }

    #[test]
    fn table_csv_has_fixed_column_order_and_blank_cells() {
        let dir = tempfile::tempdir().unwrap();
        let mut cells = BTreeMap::new();
        cells.insert(
            ConfigTag::C,
            AxisErrors {
                axes: [0.1, 0.2, 0.3],
                mean: 0.2,
                count: 10,
            },
        );
        let rows = vec![EstimatorRow {
            name: "vs".into(),
            cells,
            mean_over_configs: Some(0.2),
        }];
        let path = dir.path().join("table.csv");
        write_table_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "estimator,L3,L2,L1,C,R1,R2,R3,Z1,Z2,Z3,unseen_material,unseen_tool,mean"
        );
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[0], "vs");
        assert_eq!(row[4], "0.2000"); // C column filled
        assert_eq!(row[1], ""); // L3 absent
        assert_eq!(row[13], "0.2000");
    }

    #[test]
    fn per_axis_csv_lists_three_rows_per_condition() {
        let dir = tempfile::tempdir().unwrap();
        let mut cells = BTreeMap::new();
        cells.insert(
            ConfigTag::Z1,
            AxisErrors {
                axes: [0.5, 0.6, 0.7],
                mean: 0.6,
                count: 4,
            },
        );
        let rows = vec![EstimatorRow {
            name: "s".into(),
            cells,
            mean_over_configs: None,
        }];
        let path = dir.path().join("per_axis.csv");
        write_per_axis_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "s,Z1,x,0.5000");
        assert_eq!(lines[3], "s,Z1,z,0.7000");
    }

    #[test]
    fn grad_cam_produces_normalized_upsampled_map() {
        let mut net = Network::build(Variant::V, 5);
        let stack = Tensor::new(
            vec![3, 16, 16],
            (0..3 * 16 * 16).map(|i| (i % 7) as f64 * 0.1).collect(),
        )
        .unwrap();
        let cam = grad_cam(&mut net, &stack, None).unwrap();
        assert_eq!(cam.full.0, 16);
        assert_eq!(cam.full.1, 16);
        assert!(cam.full.2.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(
            cam.coarse.2.iter().any(|v| *v > 0.0),
            "map is entirely flat"
        );
    }

    #[test]
    fn grad_cam_rejects_state_only_variant() {
        let mut net = Network::build(Variant::S, 5);
        let stack = Tensor::new(vec![3, 16, 16], vec![0.0; 3 * 16 * 16]).unwrap();
        assert!(grad_cam(&mut net, &stack, None).is_err());
    }

    #[test]
    fn cam_files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let cam = CamMap {
            coarse: (2, 2, vec![0.0, 1.0, 0.5, 0.25]),
            full: (4, 4, bilinear_upsample(&[0.0, 1.0, 0.5, 0.25], 2, 2, 4, 4)),
        };
        let pgm = dir.path().join("cam.pgm");
        let svg = dir.path().join("cam.svg");
        write_cam_pgm(&pgm, &cam).unwrap();
        write_cam_svg(&svg, &cam, 8).unwrap();
        let bytes = std::fs::read(&pgm).unwrap();
        assert!(bytes.starts_with(b"P5\n4 4\n255\n"));
        assert_eq!(bytes.len(), "P5\n4 4\n255\n".len() + 16);
        let text = std::fs::read_to_string(&svg).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("fill-opacity=\"1.000\""));
    }

    #[test]
    fn bilinear_upsample_interpolates_midpoints() {
        // 1x2 source [0, 1] widened to 1x3 must hit 0.5 in the middle
        let up = bilinear_upsample(&[0.0, 1.0], 2, 1, 3, 1);
        assert_eq!(up, vec![0.0, 0.5, 1.0]);
    }
}
