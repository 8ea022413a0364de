use super::IoError;
use crate::canvas::Image;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Mean squared error over all channels.
pub fn mse(a: &Image, b: &Image) -> Result<f64, IoError> {
    if a.dims() != b.dims() {
        return Err(IoError::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let n = a.data().len().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10·log10(1/MSE)` for images in [0, 1]; identical images give `+inf`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, IoError> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// F-measure between predicted and ground-truth boundary pixels, matching
/// within a Chebyshev radius of `tolerance` pixels.
pub fn boundary_f1(pred: &[bool], truth: &[bool], height: usize, width: usize, tolerance: usize) -> f64 {
    assert_eq!(pred.len(), height * width);
    assert_eq!(truth.len(), height * width);
    let near = |map: &[bool], y: usize, x: usize| {
        let (y0, y1) = (y.saturating_sub(tolerance), (y + tolerance).min(height - 1));
        let (x0, x1) = (x.saturating_sub(tolerance), (x + tolerance).min(width - 1));
        (y0..=y1).any(|yy| (x0..=x1).any(|xx| map[yy * width + xx]))
    };
    let (mut tp_p, mut n_p, mut tp_t, mut n_t) = (0usize, 0usize, 0usize, 0usize);
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if pred[i] {
                n_p += 1;
                tp_p += near(truth, y, x) as usize;
            }
            if truth[i] {
                n_t += 1;
                tp_t += near(pred, y, x) as usize;
            }
        }
    }
    if n_p == 0 && n_t == 0 {
        return 1.0;
    }
    let precision = if n_p == 0 { 0.0 } else { tp_p as f64 / n_p as f64 };
    let recall = if n_t == 0 { 0.0 } else { tp_t as f64 / n_t as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Writes `+inf` as the string `"inf"` so the JSON stays standard.
mod inf_f64 {
    use super::*;

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Repr::Num(*v).serialize(s)
        } else if *v > 0.0 {
            Repr::Text("inf".into()).serialize(s)
        } else if *v < 0.0 {
            Repr::Text("-inf".into()).serialize(s)
        } else {
            Repr::Text("nan".into()).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("bad float '{other}'"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub mse: f64,
    #[serde(with = "inf_f64")]
    pub psnr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary_f1: Option<f64>,
}

/// Per-image scores with their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsReport {
    pub images: Vec<ImageMetrics>,
    pub mean_mse: f64,
    #[serde(with = "inf_f64")]
    pub mean_psnr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_iou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_boundary_f1: Option<f64>,
}

impl MetricsReport {
    pub fn from_images(images: Vec<ImageMetrics>) -> Self {
        let n = images.len().max(1) as f64;
        let mean_of = |f: &dyn Fn(&ImageMetrics) -> Option<f64>| {
            let v: Vec<f64> = images.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Self {
            mean_mse: images.iter().map(|m| m.mse).sum::<f64>() / n,
            mean_psnr: images.iter().map(|m| m.psnr).sum::<f64>() / n,
            mean_iou: mean_of(&|m| m.iou),
            mean_boundary_f1: mean_of(&|m| m.boundary_f1),
            images,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, IoError> {
        serde_json::from_str(s).map_err(|e| IoError::Shape(format!("metrics JSON: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = Image::filled(4, 4, [0.3, 0.5, 0.7]);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &Image::new(2, 2)).is_err());
    }

    #[test]
    fn boundary_f1_extremes() {
        let t = vec![true, false, false, false];
        assert_eq!(boundary_f1(&t, &t, 2, 2, 0), 1.0);
        assert_eq!(boundary_f1(&[false, false, false, true], &t, 2, 2, 0), 0.0);
        assert_eq!(boundary_f1(&[false, false, false, true], &t, 2, 2, 1), 1.0);
    }

    #[test]
    fn report_round_trips_with_infinity() {
        let r = MetricsReport::from_images(vec![
            ImageMetrics { name: "a".into(), mse: 0.0, psnr: f64::INFINITY, iou: Some(0.5), boundary_f1: None },
            ImageMetrics { name: "b".into(), mse: 0.01, psnr: 20.0, iou: None, boundary_f1: None },
        ]);
        let back = MetricsReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.mean_psnr, f64::INFINITY);
        assert_eq!(back.mean_iou, Some(0.5));
    }
}
