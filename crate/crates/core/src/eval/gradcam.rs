//! Gradient-weighted class-activation maps on CNN-family adapters:
//! channel weights are the spatial means of the class logit's gradient on
//! the final backbone feature map; the map is the rectified weighted sum,
//! min-max normalized and upsampled to image size.

use crate::adapters::{Family, ModelAdapter};
use crate::error::{Error, Result};
use ndarray::{Array2, Array3, Array4, ArrayD, IxDyn};
use xfer_tensor::Tensor;

/// Heatmap in [0, 1] with the input's spatial shape. `class_index`
/// defaults to the predicted class.
pub fn gradcam(adapter: &dyn ModelAdapter, image: &Array3<f64>, class_index: Option<usize>) -> Result<Array2<f64>> {
    if adapter.family() != Family::Cnn {
        return Err(Error::UnsupportedArchitecture(format!(
            "class-activation maps need a cnn-family adapter; '{}' is {}. \
             Pick a CNN target or skip the heatmap step",
            adapter.model_id(),
            adapter.family()
        )));
    }
    let (c, h, w) = image.dim();
    let mut x = Array4::<f64>::zeros((1, c, h, w));
    x.index_axis_mut(ndarray::Axis(0), 0).assign(image);

    // input requires a gradient so intermediate features keep theirs even
    // on a frozen adapter
    let xt = Tensor::input(x.into_dyn(), true);
    let (features, logits) = adapter.backbone_features_t(&xt)?;
    let logit_values = logits.value();
    let classes = adapter.num_classes();
    let class = match class_index {
        Some(ci) if ci >= classes => {
            return Err(Error::InputContract(format!("class index {ci} out of range for {classes} classes")));
        }
        Some(ci) => ci,
        None => {
            let row = logit_values.as_slice().expect("contiguous logits");
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        }
    };

    let mut seed = ArrayD::zeros(IxDyn(&[1, classes]));
    seed[[0, class]] = 1.0;
    logits.backward_with(&seed);

    let fmap = features
        .value()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("feature map rank");
    let fgrad = features
        .grad()
        .expect("feature gradient")
        .into_dimensionality::<ndarray::Ix4>()
        .expect("feature grad rank");
    let (_, nf, fh, fw) = fmap.dim();

    let mut cam = Array2::<f64>::zeros((fh, fw));
    for f in 0..nf {
        let mut weight = 0.0;
        for y in 0..fh {
            for xx in 0..fw {
                weight += fgrad[[0, f, y, xx]];
            }
        }
        weight /= (fh * fw) as f64;
        for y in 0..fh {
            for xx in 0..fw {
                cam[[y, xx]] += weight * fmap[[0, f, y, xx]];
            }
        }
    }
    cam.mapv_inplace(|v| v.max(0.0));

    let max = cam.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = cam.iter().cloned().fold(f64::INFINITY, f64::min);
    if max > min && max > 0.0 {
        cam.mapv_inplace(|v| (v - min) / (max - min));
    } else {
        cam.fill(0.0);
    }

    // nearest upsample to the image's spatial shape
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        let sy = y * fh / h;
        for xx in 0..w {
            let sx = xx * fw / w;
            out[[y, xx]] = cam[[sy, sx]];
        }
    }
    Ok(out)
}

/// Write a heatmap as an 8-bit grayscale PNG.
pub fn save_heatmap(map: &Array2<f64>, path: &std::path::Path) -> Result<()> {
    let (h, w) = map.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (map[[y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("png encode: {e}"))))
}
