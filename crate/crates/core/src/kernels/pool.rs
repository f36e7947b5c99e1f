use crate::params::{PoolMode, PoolParams};
use crate::tensor::{checked_extent, ShapeError, Tensor4};

pub fn pool_out_hw(p: &PoolParams, h: usize, w: usize) -> Result<(usize, usize), ShapeError> {
    Ok((
        checked_extent("height", h, p.kernel.h, p.stride.h, p.pad.h)?,
        checked_extent("width", w, p.kernel.w, p.stride.w, p.pad.w)?,
    ))
}

/// Max or average pooling. Out-of-bounds taps are skipped rather than read as
/// zero, so averages divide by the number of in-bounds elements. Since
/// `pad < kernel`, no window falls entirely into the padding.
pub fn pool2d(x: &Tensor4, p: &PoolParams) -> Result<Tensor4, ShapeError> {
    p.validate()?;
    let (ho, wo) = pool_out_hw(p, x.h(), x.w())?;
    let (h, w) = (x.h(), x.w());
    let (k, s, pad) = (p.kernel, p.stride, p.pad);
    let mut out = Vec::with_capacity(x.n() * x.c() * ho * wo);
    for b in 0..x.n() {
        for c in 0..x.c() {
            let plane = x.plane(b, c);
            for oy in 0..ho {
                let y0 = (oy * s.h) as isize - pad.h as isize;
                let ys = y0.max(0) as usize..((y0 + k.h as isize).min(h as isize)) as usize;
                for ox in 0..wo {
                    let x0 = (ox * s.w) as isize - pad.w as isize;
                    let xs = x0.max(0) as usize..((x0 + k.w as isize).min(w as isize)) as usize;
                    let v = match p.mode {
                        PoolMode::Max => {
                            let mut m = f32::NEG_INFINITY;
                            for iy in ys.clone() {
                                for &v in &plane[iy * w + xs.start..iy * w + xs.end] {
                                    if v > m {
                                        m = v;
                                    }
                                }
                            }
                            m
                        }
                        PoolMode::Average => {
                            let mut sum = 0f64;
                            for iy in ys.clone() {
                                for &v in &plane[iy * w + xs.start..iy * w + xs.end] {
                                    sum += v as f64;
                                }
                            }
                            (sum / (ys.len() * xs.len()) as f64) as f32
                        }
                    };
                    out.push(v);
                }
            }
        }
    }
    Tensor4::new(x.n(), x.c(), ho, wo, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Tensor4 {
        Tensor4::new(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn unit_window_is_identity() {
        let x = Tensor4::from_fn(2, 3, 4, 5, |n, c, y, xx| ((n * 7 + c * 5 + y * 3 + xx) % 11) as f32 - 5.0);
        for mode in [PoolMode::Max, PoolMode::Average] {
            let y = pool2d(&x, &PoolParams::new(mode, 1, 1, 0)).unwrap();
            assert!(y.bitwise_eq(&x));
        }
    }

    #[test]
    fn max_of_2x2() {
        let y = pool2d(&grid(), &PoolParams::new(PoolMode::Max, 2, 2, 0)).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let y = pool2d(&grid(), &PoolParams::new(PoolMode::Average, 2, 2, 0)).unwrap();
        assert_eq!(y.data(), &[2.5]);
    }

    #[test]
    fn constant_input() {
        let x = Tensor4::filled(1, 2, 5, 5, 3.25f32);
        for mode in [PoolMode::Max, PoolMode::Average] {
            let y = pool2d(&x, &PoolParams::new(mode, 3, 2, 1)).unwrap();
            assert_eq!(y.dims(), [1, 2, 3, 3]);
            assert!(y.data().iter().all(|&v| v == 3.25));
        }
    }

    #[test]
    fn average_counts_in_bounds_only() {
        // top-left window of a 3x3 pad-1 pool covers only x[0..2, 0..2]
        let y = pool2d(&grid(), &PoolParams::new(PoolMode::Average, 3, 1, 1)).unwrap();
        assert_eq!(y.dims(), [1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn rejects_empty_output() {
        let x = Tensor4::<f32>::zeros(1, 1, 2, 2);
        assert!(matches!(
            pool2d(&x, &PoolParams::new(PoolMode::Max, 3, 1, 0)),
            Err(ShapeError::NonPositiveExtent { .. })
        ));
    }
}
