//! Evaluation metrics on label volumes: Dice similarity coefficient, exact
//! Hausdorff distance and absolute volume difference, plus argmax label
//! reconstruction from class probabilities.
//!
//! Undefined metrics (Hausdorff with an empty side, AVD with an empty
//! ground truth) are `None` and serialize as `NA`.

use serde::{Deserialize, Serialize};

use crate::edt::squared_edt;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::volume::{LabelVolume, Tissue};

fn check_dims(a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(
            "metric",
            format!("volume dims {:?} vs {:?}", a.dims(), b.dims()),
        ));
    }
    Ok(())
}

/// `2TP / (2TP + FP + FN)` for one class; 1.0 when both masks are empty.
pub fn hard_dsc(a: &LabelVolume, b: &LabelVolume, class_id: u8) -> Result<f64> {
    check_dims(a, b)?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        match (x == class_id, y == class_id) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fneg += 1,
            _ => {}
        }
    }
    if tp + fp + fneg == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64)
}

fn directed_sq(from: &[bool], dist_to_other: &[f64]) -> f64 {
    from.iter()
        .zip(dist_to_other)
        .filter(|(&m, _)| m)
        .fold(0.0, |acc, (_, &d)| if d > acc { d } else { acc })
}

/// Directed Hausdorff distance `max_{a in A} min_{b in B} |a - b|` in mm.
pub fn directed_hausdorff(a: &LabelVolume, b: &LabelVolume, class_id: u8, spacing: [f64; 3]) -> Result<Option<f64>> {
    check_dims(a, b)?;
    let (ma, mb) = (a.mask(class_id), b.mask(class_id));
    if !ma.contains(&true) || !mb.contains(&true) {
        return Ok(None);
    }
    let db = squared_edt(&mb, b.dims(), spacing);
    Ok(Some(directed_sq(&ma, &db).sqrt()))
}

/// Symmetric Hausdorff distance in mm between the voxel-centre point sets
/// of `class_id`. `None` when either set is empty.
pub fn hausdorff(a: &LabelVolume, b: &LabelVolume, class_id: u8, spacing: [f64; 3]) -> Result<Option<f64>> {
    check_dims(a, b)?;
    let (ma, mb) = (a.mask(class_id), b.mask(class_id));
    if !ma.contains(&true) || !mb.contains(&true) {
        return Ok(None);
    }
    let da = squared_edt(&ma, a.dims(), spacing);
    let db = squared_edt(&mb, b.dims(), spacing);
    let h_ab = directed_sq(&ma, &db);
    let h_ba = directed_sq(&mb, &da);
    Ok(Some(h_ab.max(h_ba).sqrt()))
}

/// `|vol(pred) - vol(gt)| / vol(gt)`; `None` for an empty ground truth.
pub fn avd(gt: &LabelVolume, pred: &LabelVolume, class_id: u8) -> Result<Option<f64>> {
    check_dims(gt, pred)?;
    let a = gt.count(class_id);
    if a == 0 {
        return Ok(None);
    }
    let b = pred.count(class_id);
    Ok(Some((b as f64 - a as f64).abs() / a as f64))
}

/// Per-pixel argmax over the channel axis of `[N, K, H, W]`, returning
/// `N*H*W` labels. Ties go to the lowest class index.
pub fn reconstruct_labels<T: Scalar>(probs: &Tensor<T>) -> Result<Vec<u8>> {
    let (n, k, h, w) = probs.dims4("reconstruct_labels")?;
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        let item = probs.item(b);
        for px in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if item[c * hw + px] > item[best * hw + px] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

/// DSC / HD / AVD for CSF, GM and WM on one volume pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Indexed CSF, GM, WM.
    pub dsc: [f64; 3],
    /// Hausdorff distance in mm.
    pub hd: [Option<f64>; 3],
    pub avd: [Option<f64>; 3],
    /// Mean of the three tissue DSCs; background excluded.
    pub mean_dsc: f64,
}

pub const METRICS_CSV_HEADER: &str =
    "volume_id,dsc_csf,dsc_gm,dsc_wm,hd_csf,hd_gm,hd_wm,avd_csf,avd_gm,avd_wm,mean_dsc";

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn json_opt(v: Option<f64>) -> serde_json::Value {
    v.map_or_else(|| serde_json::Value::from("NA"), serde_json::Value::from)
}

impl MetricsRecord {
    pub fn csv_row(&self, volume_id: &str) -> String {
        let mut cols = vec![volume_id.to_string()];
        cols.extend(self.dsc.iter().map(|v| v.to_string()));
        cols.extend(self.hd.iter().map(|&v| fmt_opt(v)));
        cols.extend(self.avd.iter().map(|&v| fmt_opt(v)));
        cols.push(self.mean_dsc.to_string());
        cols.join(",")
    }

    /// Flat JSON object with the CSV column names; undefined entries are `"NA"`.
    pub fn json_row(&self, volume_id: &str) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        m.insert("volume_id".into(), volume_id.into());
        for (i, t) in Tissue::FOREGROUND.iter().enumerate() {
            m.insert(format!("dsc_{}", t.short_name()), self.dsc[i].into());
        }
        for (i, t) in Tissue::FOREGROUND.iter().enumerate() {
            m.insert(format!("hd_{}", t.short_name()), json_opt(self.hd[i]));
        }
        for (i, t) in Tissue::FOREGROUND.iter().enumerate() {
            m.insert(format!("avd_{}", t.short_name()), json_opt(self.avd[i]));
        }
        m.insert("mean_dsc".into(), self.mean_dsc.into());
        serde_json::Value::Object(m)
    }

    /// Entry-wise mean over records; undefined entries are skipped and an
    /// entry undefined everywhere stays undefined.
    pub fn mean(records: &[MetricsRecord]) -> Option<MetricsRecord> {
        if records.is_empty() {
            return None;
        }
        let n = records.len() as f64;
        let mean_opt = |get: &dyn Fn(&MetricsRecord) -> Option<f64>| {
            let vals: Vec<f64> = records.iter().filter_map(get).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let mut out = MetricsRecord {
            dsc: [0.0; 3],
            hd: [None; 3],
            avd: [None; 3],
            mean_dsc: records.iter().map(|r| r.mean_dsc).sum::<f64>() / n,
        };
        for i in 0..3 {
            out.dsc[i] = records.iter().map(|r| r.dsc[i]).sum::<f64>() / n;
            out.hd[i] = mean_opt(&|r| r.hd[i]);
            out.avd[i] = mean_opt(&|r| r.avd[i]);
        }
        Some(out)
    }
}

pub fn evaluate_volume(pred: &LabelVolume, gt: &LabelVolume, spacing: [f64; 3]) -> Result<MetricsRecord> {
    check_dims(pred, gt)?;
    let mut rec = MetricsRecord {
        dsc: [0.0; 3],
        hd: [None; 3],
        avd: [None; 3],
        mean_dsc: 0.0,
    };
    for (i, t) in Tissue::FOREGROUND.iter().enumerate() {
        rec.dsc[i] = hard_dsc(pred, gt, t.id())?;
        rec.hd[i] = hausdorff(pred, gt, t.id(), spacing)?;
        rec.avd[i] = avd(gt, pred, t.id())?;
    }
    rec.mean_dsc = rec.dsc.iter().sum::<f64>() / 3.0;
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(dims: [usize; 3], labels: Vec<u8>) -> LabelVolume {
        LabelVolume::new(dims, [1.0; 3], labels).unwrap()
    }

    #[test]
    fn dsc_cases() {
        let a = vol([1, 2, 2], vec![1, 1, 0, 0]);
        assert_eq!(hard_dsc(&a, &a, 1).unwrap(), 1.0);
        let b = vol([1, 2, 2], vec![0, 0, 1, 1]);
        assert_eq!(hard_dsc(&a, &b, 1).unwrap(), 0.0);
        assert_eq!(hard_dsc(&a, &b, 3).unwrap(), 1.0);
        // 2x2 block vs the same block shifted one column: overlap 2 of 4
        let mut la = vec![0u8; 12];
        let mut lb = vec![0u8; 12];
        for y in 0..2 {
            for x in 0..2 {
                la[y * 3 + x] = 2;
                lb[y * 3 + x + 1] = 2;
            }
        }
        let (a, b) = (vol([1, 4, 3], la), vol([1, 4, 3], lb));
        assert_eq!(hard_dsc(&a, &b, 2).unwrap(), 0.5);
    }

    #[test]
    fn dims_mismatch_rejected() {
        let a = vol([1, 2, 2], vec![0; 4]);
        let b = vol([1, 1, 4], vec![0; 4]);
        assert!(hard_dsc(&a, &b, 1).is_err());
        assert!(hausdorff(&a, &b, 1, [1.0; 3]).is_err());
    }

    #[test]
    fn hausdorff_345() {
        let mut la = vec![0u8; 5 * 5];
        let mut lb = vec![0u8; 5 * 5];
        la[0] = 1;
        lb[3 * 5 + 4] = 1;
        // dims [1, 5, 5]: (0,0,0) vs (0,3,4)
        let (a, b) = (vol([1, 5, 5], la), vol([1, 5, 5], lb));
        assert_eq!(hausdorff(&a, &b, 1, [1.0; 3]).unwrap(), Some(5.0));
        assert_eq!(hausdorff(&a, &a, 1, [1.0; 3]).unwrap(), Some(0.0));
        assert_eq!(hausdorff(&a, &b, 1, [2.0; 3]).unwrap(), Some(10.0));
        assert_eq!(hausdorff(&a, &b, 2, [1.0; 3]).unwrap(), None);
    }

    #[test]
    fn avd_cases() {
        let mut gt = vec![0u8; 200];
        gt[..100].iter_mut().for_each(|v| *v = 1);
        let mut pred = vec![0u8; 200];
        pred[..80].iter_mut().for_each(|v| *v = 1);
        let (g, p) = (vol([1, 10, 20], gt), vol([1, 10, 20], pred));
        assert!((avd(&g, &p, 1).unwrap().unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(avd(&g, &g, 1).unwrap(), Some(0.0));
        let empty = vol([1, 10, 20], vec![0; 200]);
        assert_eq!(avd(&g, &empty, 1).unwrap(), Some(1.0));
        assert_eq!(avd(&empty, &g, 1).unwrap(), None);
    }

    #[test]
    fn argmax_and_ties() {
        let p = Tensor::<f32>::new(vec![1, 4, 1, 2], vec![0.1, 0.25, 0.7, 0.25, 0.1, 0.25, 0.1, 0.25]).unwrap();
        assert_eq!(reconstruct_labels(&p).unwrap(), vec![1, 0]);
    }

    #[test]
    fn perfect_record_and_na_row() {
        let l: Vec<u8> = (0..27).map(|i| (i % 3) as u8).collect();
        let v = vol([3, 3, 3], l);
        let r = evaluate_volume(&v, &v, [1.0; 3]).unwrap();
        assert_eq!(r.dsc, [1.0; 3]);
        assert_eq!(r.hd[..2], [Some(0.0), Some(0.0)]);
        assert_eq!(r.hd[2], None);
        assert_eq!(r.avd[2], None);
        let row = r.csv_row("v1");
        assert!(row.ends_with(",NA,1"), "{row}");
        assert_eq!(r.json_row("v1")["hd_wm"], "NA");
    }

    #[test]
    fn mean_skips_undefined() {
        let a = MetricsRecord { dsc: [1.0, 0.5, 0.0], hd: [Some(2.0), None, None], avd: [None, Some(0.5), None], mean_dsc: 0.5 };
        let b = MetricsRecord { dsc: [0.0, 0.5, 1.0], hd: [Some(4.0), Some(1.0), None], avd: [None, Some(0.1), None], mean_dsc: 0.5 };
        let m = MetricsRecord::mean(&[a, b]).unwrap();
        assert_eq!(m.dsc, [0.5, 0.5, 0.5]);
        assert_eq!(m.hd, [Some(3.0), Some(1.0), None]);
        assert_eq!(m.avd[0], None);
    }
}
