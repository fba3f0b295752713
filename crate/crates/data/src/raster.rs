/// Rectangular f64 intensity image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub w: usize,
    pub h: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn zeros(w: usize, h: usize) -> Self {
        Raster { w, h, data: vec![0.0; w * h] }
    }

    pub fn filled(w: usize, h: usize, value: f64) -> Self {
        Raster { w, h, data: vec![value; w * h] }
    }

    pub fn from_data(w: usize, h: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), w * h, "raster data length");
        Raster { w, h, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.w + x] = value;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Separable Gaussian blur with edge-clamped sampling. `sigma <= 0`
    /// returns a copy.
    pub fn gaussian_blur(&self, sigma: f64) -> Raster {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
        let mut sum = 0.0;
        for i in -radius..=radius {
            let v = (-(i as f64 * i as f64) / (2.0 * sigma * sigma)).exp();
            kernel.push(v);
            sum += v;
        }
        for v in &mut kernel {
            *v /= sum;
        }

        let (w, h) = (self.w as isize, self.h as isize);
        let mut horiz = vec![0.0; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = (x + ki as isize - radius).clamp(0, w - 1);
                    acc += kv * self.data[(y * w + sx) as usize];
                }
                horiz[(y * w + x) as usize] = acc;
            }
        }
        let mut out = vec![0.0; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = (y + ki as isize - radius).clamp(0, h - 1);
                    acc += kv * horiz[(sy * w + x) as usize];
                }
                out[(y * w + x) as usize] = acc;
            }
        }
        Raster { w: self.w, h: self.h, data: out }
    }
}
