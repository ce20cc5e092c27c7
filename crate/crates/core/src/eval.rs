//! PSNR, box-restricted dynamic PSNR, and per-frame evaluation reports.

use std::fmt::Write as _;
use std::time::Instant;

use crate::dataset::BoundingBox;
use crate::error::{contract_err, Result};
use crate::model::TkPlanes;
use crate::raster::{dims, RgbImage};

/// Reported in place of infinity for identical images.
pub const PSNR_CAP: f64 = 99.0;

fn check_pair(reference: &RgbImage, rendered: &RgbImage) -> Result<(usize, usize)> {
    let a = dims(reference)?;
    let b = dims(rendered)?;
    if a != b {
        return Err(contract_err!("image sizes differ: {a:?} vs {b:?}"));
    }
    Ok(a)
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

/// Mean squared error over pixels `x0..x1`, `y0..y1` (as `region`) of all
/// three channels.
fn region_mse(a: &RgbImage, b: &RgbImage, w: usize, h: usize, region: (usize, usize, usize, usize)) -> f64 {
    let (x0, x1, y0, y1) = region;
    let mut sum = 0.0f64;
    for c in 0..3 {
        for y in y0..y1 {
            let row = c * h * w + y * w;
            for (p, q) in a.data()[row + x0..row + x1].iter().zip(&b.data()[row + x0..row + x1]) {
                let d = f64::from(*p) - f64::from(*q);
                sum += d * d;
            }
        }
    }
    sum / (3 * (x1 - x0) * (y1 - y0)) as f64
}

/// `10 log10(1 / MSE)` with a peak of 1, capped at [`PSNR_CAP`].
pub fn psnr(reference: &RgbImage, rendered: &RgbImage) -> Result<f64> {
    let (h, w) = check_pair(reference, rendered)?;
    if h * w == 0 {
        return Err(contract_err!("empty images"));
    }
    Ok(psnr_from_mse(region_mse(reference, rendered, w, h, (0, w, 0, h))))
}

/// Pixel columns `floor(x_min)..ceil(x_max)` and rows likewise, clipped to
/// the image; `None` when empty.
pub fn box_pixels(b: &BoundingBox, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
    let clip = |v: f64, n: usize| v.clamp(0.0, n as f64) as usize;
    let x0 = clip(b.x_min.floor(), width);
    let x1 = clip(b.x_max.ceil(), width);
    let y0 = clip(b.y_min.floor(), height);
    let y1 = clip(b.y_max.ceil(), height);
    (x0 < x1 && y0 < y1 && b.area() > 0.0).then_some((x0, x1, y0, y1))
}

/// PSNR of each usable box, in order; degenerate boxes are skipped.
pub fn box_psnrs(reference: &RgbImage, rendered: &RgbImage, boxes: &[BoundingBox]) -> Result<Vec<f64>> {
    let (h, w) = check_pair(reference, rendered)?;
    let mut scores = Vec::with_capacity(boxes.len());
    for b in boxes {
        match box_pixels(b, w, h) {
            Some(region) => scores.push(psnr_from_mse(region_mse(reference, rendered, w, h, region))),
            None => log::warn!("skipping degenerate box {b:?}"),
        }
    }
    Ok(scores)
}

/// Arithmetic mean of per-box scores; `None` when there are none.
pub fn mean_box_psnr(scores: &[f64]) -> Option<f64> {
    (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Mean of per-box PSNRs; `None` without any usable box.
pub fn dpsnr(reference: &RgbImage, rendered: &RgbImage, boxes: &[BoundingBox]) -> Result<Option<f64>> {
    Ok(mean_box_psnr(&box_psnrs(reference, rendered, boxes)?))
}

#[derive(Clone, Debug)]
pub struct FrameReport {
    pub name: String,
    pub psnr: Option<f64>,
    pub dpsnr: Option<f64>,
    pub render_ms: f64,
    pub rays: usize,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub frames: Vec<FrameReport>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

impl EvalReport {
    pub fn mean_psnr(&self) -> Option<f64> {
        mean(self.frames.iter().filter_map(|f| f.psnr))
    }

    pub fn mean_dpsnr(&self) -> Option<f64> {
        mean(self.frames.iter().filter_map(|f| f.dpsnr))
    }

    pub fn mean_render_ms(&self) -> Option<f64> {
        mean(self.frames.iter().filter(|f| f.error.is_none()).map(|f| f.render_ms))
    }

    /// `frame,psnr,dpsnr,render_ms,rays,error`; with `timing == false` the
    /// render time column is left empty so reruns compare byte for byte.
    pub fn to_csv(&self, timing: bool) -> String {
        let mut s = String::from("frame,psnr,dpsnr,render_ms,rays,error\n");
        for f in &self.frames {
            let ms = if timing {
                format!("{:.3}", f.render_ms)
            } else {
                String::new()
            };
            let err = f.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                f.name,
                fmt_opt(f.psnr),
                fmt_opt(f.dpsnr),
                ms,
                f.rays,
                err
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let failed = self.frames.iter().filter(|f| f.error.is_some()).count();
        let show = |v: Option<f64>, unit: &str| v.map_or("n/a".to_string(), |v| format!("{v:.2} {unit}"));
        format!(
            "frames: {} ({} failed)\nmean PSNR: {}\nmean DPSNR: {}\nmean render time: {}\nrays per frame: {}\n",
            self.frames.len(),
            failed,
            show(self.mean_psnr(), "dB"),
            show(self.mean_dpsnr(), "dB"),
            show(self.mean_render_ms(), "ms"),
            self.frames.first().map_or(0, |f| f.rays),
        )
    }
}

/// A frame to score: ground truth, pose, and dynamic boxes.
pub struct EvalFrame<'a> {
    pub name: String,
    pub pose: &'a crate::camera::CameraPose,
    pub image: &'a RgbImage,
    pub boxes: &'a [BoundingBox],
}

/// Renders every frame and scores it; failures become per-frame errors.
/// `on_render` sees each successful render, e.g. to save it.
pub fn evaluate(model: &TkPlanes, frames: &[EvalFrame<'_>], mut on_render: impl FnMut(&str, &RgbImage)) -> EvalReport {
    let rays = model.config.rays_per_image();
    let frames = frames
        .iter()
        .map(|f| {
            let start = Instant::now();
            let scored = model.render(f.pose).and_then(|img| {
                let render_ms = start.elapsed().as_secs_f64() * 1e3;
                let p = psnr(f.image, &img)?;
                let d = dpsnr(f.image, &img, f.boxes)?;
                on_render(&f.name, &img);
                Ok((p, d, render_ms))
            });
            match scored {
                Ok((p, d, render_ms)) => FrameReport {
                    name: f.name.clone(),
                    psnr: Some(p),
                    dpsnr: d,
                    render_ms,
                    rays,
                    error: None,
                },
                Err(e) => FrameReport {
                    name: f.name.clone(),
                    psnr: None,
                    dpsnr: None,
                    render_ms: 0.0,
                    rays,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    EvalReport { frames }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;

    fn uniform(v: f32) -> RgbImage {
        Tensor::full(&[3, 8, 8], v)
    }

    fn full_box() -> BoundingBox {
        BoundingBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 8.0,
            y_max: 8.0,
        }
    }

    #[test]
    fn psnr_examples() {
        let a = uniform(0.5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        // MSE computed in f64 from f32 pixels: 0.1 is not exact in f32
        let p = psnr(&uniform(0.0), &uniform(0.1)).unwrap();
        assert_abs_diff_eq!(p, 20.0, epsilon = 1e-6);
        let p = psnr(&uniform(0.25), &uniform(0.25 + 0.031_622_776)).unwrap();
        assert_abs_diff_eq!(p, 30.0, epsilon = 1e-5);
        assert!(psnr(&a, &Tensor::full(&[3, 8, 7], 0.5)).is_err());
    }

    #[test]
    fn dpsnr_examples() {
        let (a, b) = (uniform(0.2), uniform(0.3));
        let whole = dpsnr(&a, &b, &[full_box()]).unwrap().unwrap();
        assert_eq!(whole, psnr(&a, &b).unwrap());
        assert_eq!(dpsnr(&a, &b, &[]).unwrap(), None);
        let flat = BoundingBox {
            x_min: 2.0,
            y_min: 3.0,
            x_max: 2.0,
            y_max: 6.0,
        };
        assert_eq!(dpsnr(&a, &b, &[flat]).unwrap(), None);
        assert_eq!(dpsnr(&a, &b, &[flat, full_box()]).unwrap(), Some(whole));
    }

    #[test]
    fn dpsnr_averages_box_scores() {
        // left half off by 0.1 (20 dB), right half off by sqrt(0.001) (30 dB)
        let a = Tensor::full(&[3, 4, 4], 0.0f32);
        let mut b = a.clone();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    b.data_mut()[c * 16 + y * 4 + x] = if x < 2 { 0.1 } else { 0.001f32.sqrt() };
                }
            }
        }
        let left = BoundingBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 2.0,
            y_max: 4.0,
        };
        let right = BoundingBox {
            x_min: 2.0,
            x_max: 4.0,
            ..left
        };
        let d = dpsnr(&a, &b, &[left, right]).unwrap().unwrap();
        assert_abs_diff_eq!(d, 25.0, epsilon = 1e-5);
        assert_eq!(mean_box_psnr(&[20.0, 30.0]), Some(25.0));
        assert_eq!(mean_box_psnr(&[]), None);
    }

    #[test]
    fn fractional_boxes_cover_touched_pixels() {
        let b = BoundingBox {
            x_min: 1.5,
            y_min: 0.2,
            x_max: 3.1,
            y_max: 7.9,
        };
        assert_eq!(box_pixels(&b, 8, 8), Some((1, 4, 0, 8)));
        let off = BoundingBox {
            x_min: 9.0,
            y_min: 0.0,
            x_max: 12.0,
            y_max: 2.0,
        };
        assert_eq!(box_pixels(&off, 8, 8), None);
    }

    #[test]
    fn csv_has_one_row_per_frame() {
        let r = EvalReport {
            frames: vec![
                FrameReport {
                    name: "a".into(),
                    psnr: Some(30.0),
                    dpsnr: None,
                    render_ms: 12.5,
                    rays: 80,
                    error: None,
                },
                FrameReport {
                    name: "b".into(),
                    psnr: None,
                    dpsnr: None,
                    render_ms: 0.0,
                    rays: 80,
                    error: Some("bad, worse".into()),
                },
            ],
        };
        let csv = r.to_csv(true);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.contains("a,30.000000,,12.500,80,\n"));
        assert!(csv.contains("b,,,0.000,80,bad; worse"));
        assert!(!r.to_csv(false).contains("12.5"));
        assert_eq!(r.mean_psnr(), Some(30.0));
        assert!(r.summary().contains("1 failed"));
    }
}
