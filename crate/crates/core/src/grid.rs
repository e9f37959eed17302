//! Uniform grids over centered boxes and the sampled functions living on them.
//!
//! Node `i` along an axis with `N` points and half-width `L` sits at
//! `-L + i h`, `h = 2L/N`; the origin is node `N/2`. The dual frequency grid has
//! spacing `1/(2L)` and nodes `(i - N/2)/(2L)`. Samples are row-major with the
//! last axis fastest.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Space,
    Frequency,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    points: Vec<usize>,
    half_width: Vec<f64>,
}

impl Grid {
    pub fn new(points: Vec<usize>, half_width: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.len() != half_width.len() {
            return Err(Error::InvalidInput(
                "grid needs one size and half-width per axis".into(),
            ));
        }
        for (&n, &l) in points.iter().zip(&half_width) {
            if n < 2 || !n.is_power_of_two() {
                return Err(Error::InvalidInput(format!(
                    "points per axis must be a power of two, got {n}"
                )));
            }
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "half-width must be positive, got {l}"
                )));
            }
        }
        Ok(Grid { points, half_width })
    }

    /// Same size and half-width on every axis.
    pub fn cube(dim: usize, points: usize, half_width: f64) -> Result<Self> {
        Grid::new(vec![points; dim], vec![half_width; dim])
    }

    /// Product grid: axes of `self` followed by axes of `other`.
    pub fn product(&self, other: &Grid) -> Grid {
        let mut points = self.points.clone();
        points.extend(&other.points);
        let mut half_width = self.half_width.clone();
        half_width.extend(&other.half_width);
        Grid { points, half_width }
    }

    /// Sub-grid made of the given consecutive axes.
    pub fn axes(&self, range: std::ops::Range<usize>) -> Grid {
        Grid {
            points: self.points[range.clone()].to_vec(),
            half_width: self.half_width[range].to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.points.len()
    }
    pub fn points(&self) -> &[usize] {
        &self.points
    }
    pub fn half_widths(&self) -> &[f64] {
        &self.half_width
    }
    pub fn len(&self) -> usize {
        self.points.iter().product()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn spacing(&self, axis: usize) -> f64 {
        2.0 * self.half_width[axis] / self.points[axis] as f64
    }
    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.spacing(a)).product()
    }
    /// Frequency spacing `1/(2L)` on an axis.
    pub fn freq_spacing(&self, axis: usize) -> f64 {
        0.5 / self.half_width[axis]
    }
    /// Largest representable frequency magnitude, `N/(4L)`.
    pub fn nyquist(&self, axis: usize) -> f64 {
        self.points[axis] as f64 * self.freq_spacing(axis) * 0.5
    }
    pub fn freq_cell_volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.freq_spacing(a)).product()
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        -self.half_width[axis] + i as f64 * self.spacing(axis)
    }
    pub fn freq_coord(&self, axis: usize, i: usize) -> f64 {
        (i as f64 - (self.points[axis] / 2) as f64) * self.freq_spacing(axis)
    }
    /// Frequency of FFT bin `m` (origin first, negative frequencies last).
    pub fn fft_freq(&self, axis: usize, m: usize) -> f64 {
        let n = self.points[axis];
        let s = if m < n / 2 {
            m as f64
        } else {
            m as f64 - n as f64
        };
        s * self.freq_spacing(axis)
    }

    pub fn unravel(&self, mut flat: usize, out: &mut [usize]) {
        for a in (0..self.dim()).rev() {
            out[a] = flat % self.points[a];
            flat /= self.points[a];
        }
    }
    pub fn ravel(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.points)
            .fold(0, |acc, (i, n)| acc * n + i)
    }

    /// Coordinates of node `flat` in the given domain.
    pub fn node(&self, flat: usize, domain: Domain) -> Vec<f64> {
        let mut idx = vec![0; self.dim()];
        self.unravel(flat, &mut idx);
        idx.iter()
            .enumerate()
            .map(|(a, &i)| match domain {
                Domain::Space => self.coord(a, i),
                Domain::Frequency => self.freq_coord(a, i),
            })
            .collect()
    }

    /// Frequency at flat position `flat` of an FFT-ordered array.
    pub fn fft_node(&self, flat: usize) -> Vec<f64> {
        let mut idx = vec![0; self.dim()];
        self.unravel(flat, &mut idx);
        idx.iter()
            .enumerate()
            .map(|(a, &m)| self.fft_freq(a, m))
            .collect()
    }

    /// Index of the node nearest to `x` along each axis, if inside the box.
    pub fn nearest(&self, x: &[f64]) -> Option<Vec<usize>> {
        let mut out = Vec::with_capacity(self.dim());
        for (a, &v) in x.iter().enumerate() {
            let t = ((v + self.half_width[a]) / self.spacing(a)).round();
            if t < 0.0 || t >= self.points[a] as f64 {
                return None;
            }
            out.push(t as usize);
        }
        Some(out)
    }

    /// Evaluates `f` at every node (space domain), in parallel.
    pub fn sample<F>(&self, f: F) -> Vec<f64>
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        (0..self.len())
            .into_par_iter()
            .map_init(
                || vec![0usize; self.dim()],
                |idx, flat| {
                    self.unravel(flat, idx);
                    let x: Vec<f64> = idx
                        .iter()
                        .enumerate()
                        .map(|(a, &i)| self.coord(a, i))
                        .collect();
                    f(&x)
                },
            )
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Samples {
    Real(Vec<f64>),
    Complex(Vec<Complex64>),
}

/// A scalar field sampled on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    pub grid: Grid,
    pub domain: Domain,
    pub samples: Samples,
}

/// Anything that can be evaluated at a point.
pub trait Field: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> f64;
}

/// A field given by a closure.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> FnField<F> {
    pub fn new(dim: usize, f: F) -> Self {
        FnField { dim, f }
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> Field for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

impl GridFunction {
    pub fn real(grid: Grid, domain: Domain, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} samples for {} nodes",
                values.len(),
                grid.len()
            )));
        }
        Ok(GridFunction {
            grid,
            domain,
            samples: Samples::Real(values),
        })
    }

    pub fn complex(grid: Grid, domain: Domain, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} samples for {} nodes",
                values.len(),
                grid.len()
            )));
        }
        Ok(GridFunction {
            grid,
            domain,
            samples: Samples::Complex(values),
        })
    }

    pub fn zeros(grid: Grid, domain: Domain) -> Self {
        let n = grid.len();
        GridFunction {
            grid,
            domain,
            samples: Samples::Real(vec![0.0; n]),
        }
    }

    /// Samples `f` at the space-domain nodes.
    pub fn from_fn<F: Fn(&[f64]) -> f64 + Sync>(grid: Grid, f: F) -> Self {
        let v = grid.sample(f);
        GridFunction {
            grid,
            domain: Domain::Space,
            samples: Samples::Real(v),
        }
    }

    /// Samples `f` at the frequency-domain nodes.
    pub fn from_fn_freq<F: Fn(&[f64]) -> f64 + Sync>(grid: Grid, f: F) -> Self {
        let v: Vec<f64> = (0..grid.len())
            .into_par_iter()
            .map(|i| f(&grid.node(i, Domain::Frequency)))
            .collect();
        GridFunction {
            grid,
            domain: Domain::Frequency,
            samples: Samples::Real(v),
        }
    }

    pub fn is_complex(&self) -> bool {
        matches!(self.samples, Samples::Complex(_))
    }

    /// Real samples; complex samples are an error.
    pub fn values(&self) -> Result<&[f64]> {
        match &self.samples {
            Samples::Real(v) => Ok(v),
            Samples::Complex(_) => Err(Error::InvalidInput("expected real samples".into())),
        }
    }

    pub fn values_mut(&mut self) -> Result<&mut Vec<f64>> {
        match &mut self.samples {
            Samples::Real(v) => Ok(v),
            Samples::Complex(_) => Err(Error::InvalidInput("expected real samples".into())),
        }
    }

    /// Samples as complex numbers.
    pub fn to_complex(&self) -> Vec<Complex64> {
        match &self.samples {
            Samples::Real(v) => v.iter().map(|&r| Complex64::new(r, 0.0)).collect(),
            Samples::Complex(v) => v.clone(),
        }
    }

    pub fn abs_values(&self) -> Vec<f64> {
        match &self.samples {
            Samples::Real(v) => v.iter().map(|r| r.abs()).collect(),
            Samples::Complex(v) => v.iter().map(|z| z.norm()).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.abs_values().into_iter().fold(0.0, f64::max)
    }

    /// `Σ |f| hⁿ` over the nodes of the function's domain.
    pub fn l1_norm(&self) -> f64 {
        let cell = match self.domain {
            Domain::Space => self.grid.cell_volume(),
            Domain::Frequency => self.grid.freq_cell_volume(),
        };
        self.abs_values().iter().sum::<f64>() * cell
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        self.grid.node(flat, self.domain)
    }

    pub fn same_grid(&self, other: &GridFunction) -> Result<()> {
        if self.grid != other.grid || self.domain != other.domain {
            return Err(Error::GridMismatch(
                "operands live on different grids".into(),
            ));
        }
        Ok(())
    }

    /// Multilinear interpolation of real space-domain samples; zero outside the box.
    pub fn interpolate(&self, x: &[f64]) -> f64 {
        let v = match &self.samples {
            Samples::Real(v) => v,
            Samples::Complex(_) => return f64::NAN,
        };
        let dim = self.grid.dim();
        let mut base = vec![0usize; dim];
        let mut frac = vec![0.0; dim];
        for a in 0..dim {
            let t = (x[a] + self.grid.half_width[a]) / self.grid.spacing(a);
            if !(t >= 0.0) || t > (self.grid.points[a] - 1) as f64 {
                return 0.0;
            }
            let i = (t.floor() as usize).min(self.grid.points[a] - 2);
            base[a] = i;
            frac[a] = t - i as f64;
        }
        let mut acc = 0.0;
        let mut idx = vec![0usize; dim];
        for corner in 0..(1usize << dim) {
            let mut weight = 1.0;
            for a in 0..dim {
                let bit = (corner >> a) & 1;
                idx[a] = base[a] + bit;
                weight *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if weight != 0.0 {
                acc += weight * v[self.grid.ravel(&idx)];
            }
        }
        acc
    }

    /// Writes the AGF1 binary form.
    pub fn write_agf1<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"AGF1")?;
        w.write_u32::<LittleEndian>(self.grid.dim() as u32)?;
        for &n in &self.grid.points {
            w.write_u32::<LittleEndian>(n as u32)?;
        }
        for &l in &self.grid.half_width {
            w.write_f64::<LittleEndian>(l)?;
        }
        w.write_u8(match self.domain {
            Domain::Space => 0,
            Domain::Frequency => 1,
        })?;
        match &self.samples {
            Samples::Real(v) => {
                w.write_u8(0)?;
                for &x in v {
                    w.write_f64::<LittleEndian>(x)?;
                }
            }
            Samples::Complex(v) => {
                w.write_u8(1)?;
                for z in v {
                    w.write_f64::<LittleEndian>(z.re)?;
                    w.write_f64::<LittleEndian>(z.im)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_agf1<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"AGF1" {
            return Err(Error::Format("bad magic, expected AGF1".into()));
        }
        let dim = r.read_u32::<LittleEndian>()? as usize;
        if dim == 0 || dim > 16 {
            return Err(Error::Format(format!("implausible dimension {dim}")));
        }
        let mut points = Vec::with_capacity(dim);
        for _ in 0..dim {
            points.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let mut half = Vec::with_capacity(dim);
        for _ in 0..dim {
            half.push(r.read_f64::<LittleEndian>()?);
        }
        let grid = Grid::new(points, half).map_err(|e| Error::Format(e.to_string()))?;
        let domain = match r.read_u8()? {
            0 => Domain::Space,
            1 => Domain::Frequency,
            t => return Err(Error::Format(format!("unknown domain tag {t}"))),
        };
        let n = grid.len();
        let samples = match r.read_u8()? {
            0 => {
                let mut v = vec![0.0; n];
                r.read_f64_into::<LittleEndian>(&mut v)?;
                Samples::Real(v)
            }
            1 => {
                let mut raw = vec![0.0; 2 * n];
                r.read_f64_into::<LittleEndian>(&mut raw)?;
                Samples::Complex(raw.chunks(2).map(|c| Complex64::new(c[0], c[1])).collect())
            }
            t => return Err(Error::Format(format!("unknown sample tag {t}"))),
        };
        Ok(GridFunction {
            grid,
            domain,
            samples,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_agf1(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_agf1(&mut f)
    }
}

impl Field for GridFunction {
    fn dim(&self) -> usize {
        self.grid.dim()
    }
    fn eval(&self, x: &[f64]) -> f64 {
        self.interpolate(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_layout() {
        let g = Grid::cube(1, 8, 2.0).unwrap();
        assert_eq!(g.spacing(0), 0.5);
        assert_eq!(g.coord(0, 4), 0.0);
        assert_eq!(g.coord(0, 0), -2.0);
        assert_eq!(g.freq_coord(0, 4), 0.0);
        assert_eq!(g.freq_coord(0, 5), 0.25);
        assert_eq!(g.fft_freq(0, 7), -0.25);
        assert_eq!(g.nyquist(0), 1.0);
        let g2 = Grid::new(vec![4, 8], vec![1.0, 2.0]).unwrap();
        let mut idx = [0; 2];
        g2.unravel(13, &mut idx);
        assert_eq!(idx, [1, 5]);
        assert_eq!(g2.ravel(&idx), 13);
        assert!(Grid::cube(1, 6, 1.0).is_err());
    }

    #[test]
    fn agf1_round_trip() {
        let g = Grid::new(vec![4, 2], vec![1.5, 3.0]).unwrap();
        let f = GridFunction::from_fn(g.clone(), |x| x[0] * 10.0 + x[1]);
        let mut buf = Vec::new();
        f.write_agf1(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"AGF1");
        assert_eq!(buf.len(), 4 + 4 + 8 + 16 + 2 + 8 * 8);
        let back = GridFunction::read_agf1(&mut buf.as_slice()).unwrap();
        assert_eq!(back, f);

        let c = GridFunction::complex(
            g,
            Domain::Frequency,
            (0..8).map(|i| Complex64::new(i as f64, -1.0)).collect(),
        )
        .unwrap();
        let mut buf = Vec::new();
        c.write_agf1(&mut buf).unwrap();
        assert_eq!(GridFunction::read_agf1(&mut buf.as_slice()).unwrap(), c);
        buf[0] = b'X';
        assert!(GridFunction::read_agf1(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn interpolation_is_exact_on_affine_functions() {
        let g = Grid::new(vec![16, 8], vec![2.0, 1.0]).unwrap();
        let f = GridFunction::from_fn(g, |x| 1.0 + 2.0 * x[0] - 3.0 * x[1]);
        for p in [[0.13, -0.41], [1.2, 0.7], [-1.9, 0.0]] {
            assert!((f.interpolate(&p) - (1.0 + 2.0 * p[0] - 3.0 * p[1])).abs() < 1e-12);
        }
        assert_eq!(f.interpolate(&[5.0, 0.0]), 0.0);
    }
}
