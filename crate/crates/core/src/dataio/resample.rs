use ndarray::Array2;

use super::{Image, Mask};

/// Side length of the masks the shape prior works on.
pub const PRIOR_SIZE: usize = 64;

/// Row-major `dst x src` matrix of area-resampling weights.
///
/// Output cell `j` averages the source interval `[j*src/dst, (j+1)*src/dst)`
/// weighted by overlap, so each row sums to 1 and each column to `dst/src`.
/// The grid mean is preserved exactly for both up- and down-sampling.
pub fn area_weights(src: usize, dst: usize) -> Vec<f64> {
    assert!(src > 0 && dst > 0, "area_weights needs non-empty axes");
    let mut w = vec![0.0; dst * src];
    let scale = src as f64 / dst as f64;
    for j in 0..dst {
        let lo = j as f64 * scale;
        let hi = (j + 1) as f64 * scale;
        let first = lo.floor() as usize;
        let last = (hi.ceil() as usize).min(src);
        for i in first..last {
            let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
            w[j * src + i] = overlap / scale;
        }
    }
    w
}

fn resize_area(grid: &Array2<f64>, dst_h: usize, dst_w: usize) -> Array2<f64> {
    let (h, w) = grid.dim();
    let wh = area_weights(h, dst_h);
    let ww = area_weights(w, dst_w);
    // rows first: (dst_h x h) . (h x w)
    let mut tmp = Array2::<f64>::zeros((dst_h, w));
    for j in 0..dst_h {
        for i in 0..h {
            let a = wh[j * h + i];
            if a != 0.0 {
                for x in 0..w {
                    tmp[[j, x]] += a * grid[[i, x]];
                }
            }
        }
    }
    let mut out = Array2::<f64>::zeros((dst_h, dst_w));
    for y in 0..dst_h {
        for k in 0..dst_w {
            let mut acc = 0.0;
            for x in 0..w {
                acc += ww[k * w + x] * tmp[[y, x]];
            }
            out[[y, k]] = acc;
        }
    }
    out
}

/// Area-resample a binary mask to the 64x64 grid the shape prior consumes.
pub fn resize_mask_64(mask: &Mask) -> Array2<f32> {
    let grid = mask.mapv(f64::from);
    resize_area(&grid, PRIOR_SIZE, PRIOR_SIZE).mapv(|v| v.clamp(0.0, 1.0) as f32)
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(image: &Image, dst_h: usize, dst_w: usize) -> Image {
    let (h, w) = image.dim();
    if (h, w) == (dst_h, dst_w) {
        return image.clone();
    }
    let sy = h as f32 / dst_h as f32;
    let sx = w as f32 / dst_w as f32;
    Array2::from_shape_fn((dst_h, dst_w), |(y, x)| {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
        bilerp(image, fy, fx)
    })
}

pub(crate) fn bilerp(image: &Image, fy: f32, fx: f32) -> f32 {
    let (h, w) = image.dim();
    let y0 = fy.floor() as usize;
    let x0 = fx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ty = fy - y0 as f32;
    let tx = fx - x0 as f32;
    let top = image[[y0, x0]] * (1.0 - tx) + image[[y0, x1]] * tx;
    let bottom = image[[y1, x0]] * (1.0 - tx) + image[[y1, x1]] * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Nearest-neighbour resize; keeps masks binary.
pub fn resize_nearest(mask: &Mask, dst_h: usize, dst_w: usize) -> Mask {
    let (h, w) = mask.dim();
    if (h, w) == (dst_h, dst_w) {
        return mask.clone();
    }
    Array2::from_shape_fn((dst_h, dst_w), |(y, x)| {
        let sy = (((y as f64 + 0.5) * h as f64 / dst_h as f64) as usize).min(h - 1);
        let sx = (((x as f64 + 0.5) * w as f64 / dst_w as f64) as usize).min(w - 1);
        mask[[sy, sx]]
    })
}
