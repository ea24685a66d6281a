use crate::nn::init;
use crate::nn::param::{join, NnModule, Param, ParamSlot};
use crate::real::Real;
use ndarray::{Array2, Array3, Ix1, Ix2};
use rand_chacha::ChaCha8Rng;

/// 2D convolution, stride 1, square kernel, zero padding k/2 (shape
/// preserving). Activations are [C, H, W]; the kernel is stored flattened
/// [cout, cin*k*k] so forward and both backward passes run as single GEMMs
/// over an im2col buffer.
#[derive(Debug, Clone)]
pub struct Conv2d<F: Real> {
    pub w: Param<F, Ix2>,
    pub b: Param<F, Ix1>,
    cin: usize,
    cout: usize,
    k: usize,
    pad: usize,
}

pub struct ConvCache<F: Real> {
    cols: Array2<F>,
    h: usize,
    w: usize,
}

impl<F: Real> Conv2d<F> {
    pub fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "shape-preserving conv needs odd kernel");
        let fan_in = cin * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        Conv2d {
            w: Param::new(init::normal(rng, cout, fan_in, std)),
            b: Param::new(init::zeros1(cout)),
            cin,
            cout,
            k,
            pad: k / 2,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    pub fn in_channels(&self) -> usize {
        self.cin
    }

    fn im2col(&self, x: &Array3<F>) -> Array2<F> {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let xs = x.as_slice().expect("conv input standard layout");
        let mut cols = Array2::zeros((self.cin * self.k * self.k, h * w));
        {
            let cs = cols.as_slice_mut().expect("fresh array");
            for ci in 0..self.cin {
                for dy in 0..self.k {
                    for dx in 0..self.k {
                        let row = (ci * self.k + dy) * self.k + dx;
                        for y in 0..h {
                            let sy = y as isize + dy as isize - self.pad as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let x0 = (self.pad as isize - dx as isize).max(0) as usize;
                            let x1 = (w as isize + self.pad as isize - dx as isize)
                                .min(w as isize) as usize;
                            if x0 >= x1 {
                                continue;
                            }
                            let src0 = (ci * h + sy as usize) * w
                                + (x0 as isize + dx as isize - self.pad as isize) as usize;
                            let dst0 = row * (h * w) + y * w + x0;
                            let len = x1 - x0;
                            cs[dst0..dst0 + len].copy_from_slice(&xs[src0..src0 + len]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, gcols: &Array2<F>, h: usize, w: usize) -> Array3<F> {
        let gs = gcols.as_slice().expect("gcols standard layout");
        let mut gx = Array3::zeros((self.cin, h, w));
        {
            let xs = gx.as_slice_mut().expect("fresh array");
            for ci in 0..self.cin {
                for dy in 0..self.k {
                    for dx in 0..self.k {
                        let row = (ci * self.k + dy) * self.k + dx;
                        for y in 0..h {
                            let sy = y as isize + dy as isize - self.pad as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let x0 = (self.pad as isize - dx as isize).max(0) as usize;
                            let x1 = (w as isize + self.pad as isize - dx as isize)
                                .min(w as isize) as usize;
                            if x0 >= x1 {
                                continue;
                            }
                            let dst0 = (ci * h + sy as usize) * w
                                + (x0 as isize + dx as isize - self.pad as isize) as usize;
                            let src0 = row * (h * w) + y * w + x0;
                            for i in 0..(x1 - x0) {
                                xs[dst0 + i] = xs[dst0 + i] + gs[src0 + i];
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn forward(&self, x: &Array3<F>) -> (Array3<F>, ConvCache<F>) {
        debug_assert_eq!(x.shape()[0], self.cin);
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let cols = self.im2col(x);
        let mut out2d = self.w.value.dot(&cols);
        for (mut row, b) in out2d.rows_mut().into_iter().zip(self.b.value.iter()) {
            row.mapv_inplace(|v| v + *b);
        }
        let out = out2d.into_shape_with_order((self.cout, h, w)).expect("cout*h*w elements");
        (out, ConvCache { cols, h, w })
    }

    pub fn backward(&mut self, cache: &ConvCache<F>, gout: &Array3<F>) -> Array3<F> {
        let (h, w) = (cache.h, cache.w);
        let g2d = gout
            .to_owned()
            .into_shape_with_order((self.cout, h * w))
            .expect("cout*h*w elements");
        self.w.grad = &self.w.grad + &g2d.dot(&cache.cols.t());
        self.b.grad = &self.b.grad + &g2d.sum_axis(ndarray::Axis(1));
        let gcols = self.w.value.t().dot(&g2d);
        self.col2im(&gcols, h, w)
    }
}

impl<F: Real> NnModule<F> for Conv2d<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut dyn ParamSlot<F>)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

/// Pointwise (1x1) channel projection used by the affordance skip path.
#[derive(Debug, Clone)]
pub struct Conv1x1<F: Real> {
    pub w: Param<F, Ix2>,
    pub b: Param<F, Ix1>,
}

pub struct Conv1x1Cache<F: Real> {
    x2d: Array2<F>,
    h: usize,
    w: usize,
}

impl<F: Real> Conv1x1<F> {
    pub fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> Self {
        let std = (2.0 / cin as f64).sqrt();
        Conv1x1 { w: Param::new(init::normal(rng, cout, cin, std)), b: Param::new(init::zeros1(cout)) }
    }

    pub fn forward(&self, x: &Array3<F>) -> (Array3<F>, Conv1x1Cache<F>) {
        let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let x2d = x.to_owned().into_shape_with_order((cin, h * w)).expect("cin*h*w");
        let mut out2d = self.w.value.dot(&x2d);
        for (mut row, b) in out2d.rows_mut().into_iter().zip(self.b.value.iter()) {
            row.mapv_inplace(|v| v + *b);
        }
        let cout = self.w.value.shape()[0];
        let out = out2d.into_shape_with_order((cout, h, w)).expect("cout*h*w");
        (out, Conv1x1Cache { x2d, h, w })
    }

    pub fn backward(&mut self, cache: &Conv1x1Cache<F>, gout: &Array3<F>) -> Array3<F> {
        let cout = self.w.value.shape()[0];
        let cin = self.w.value.shape()[1];
        let g2d = gout
            .to_owned()
            .into_shape_with_order((cout, cache.h * cache.w))
            .expect("cout*h*w");
        self.w.grad = &self.w.grad + &g2d.dot(&cache.x2d.t());
        self.b.grad = &self.b.grad + &g2d.sum_axis(ndarray::Axis(1));
        let gx2d = self.w.value.t().dot(&g2d);
        gx2d.into_shape_with_order((cin, cache.h, cache.w)).expect("cin*h*w")
    }
}

impl<F: Real> NnModule<F> for Conv1x1<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut dyn ParamSlot<F>)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}
