//! Non-learned IR-to-RGB pixel manipulations and their composition.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ImagePlane, Modality};

pub const DEFAULT_SIGMA: f64 = 1.0;
pub const DEFAULT_BINS: usize = 256;

pub fn invert(img: &ImagePlane) -> Result<ImagePlane> {
    img.require_channels(1)?;
    let data = img.data().iter().map(|v| 1.0 - v).collect();
    ImagePlane::new(img.height(), img.width(), 1, data, img.modality())
}

#[inline]
fn bin_of(v: f64, bins: usize) -> usize {
    ((v * bins as f64).floor() as usize).min(bins - 1)
}

/// Histogram equalization through a `bins`-bucket empirical CDF:
/// `v -> (cdf(v) - cdf_min) / (1 - cdf_min)`. Constant images are returned
/// unchanged.
pub fn hist_equalize(img: &ImagePlane, bins: usize) -> Result<ImagePlane> {
    img.require_channels(1)?;
    if bins == 0 {
        return Err(Error::InvalidConfig("equalization needs at least one bin".into()));
    }
    let n = img.data().len() as f64;
    let mut counts = vec![0usize; bins];
    for &v in img.data() {
        counts[bin_of(v, bins)] += 1;
    }
    let mut cdf = vec![0.0; bins];
    let mut acc = 0usize;
    for (c, &k) in cdf.iter_mut().zip(&counts) {
        acc += k;
        *c = acc as f64 / n;
    }
    let cdf_min = counts
        .iter()
        .position(|&k| k > 0)
        .map(|i| cdf[i])
        .expect("non-empty image");
    if cdf_min >= 1.0 {
        return Ok(img.clone());
    }
    let data = img
        .data()
        .iter()
        .map(|&v| ((cdf[bin_of(v, bins)] - cdf_min) / (1.0 - cdf_min)).clamp(0.0, 1.0))
        .collect();
    ImagePlane::new(img.height(), img.width(), 1, data, img.modality())
}

/// Linear min-max stretch to [0, 1]; constant images are returned unchanged.
pub fn hist_stretch(img: &ImagePlane) -> Result<ImagePlane> {
    img.require_channels(1)?;
    let lo = img.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Ok(img.clone());
    }
    let range = hi - lo;
    let data = img
        .data()
        .iter()
        .map(|&v| ((v - lo) / range).clamp(0.0, 1.0))
        .collect();
    ImagePlane::new(img.height(), img.width(), 1, data, img.modality())
}

/// Normalized 1-D Gaussian taps over `[-r, r]`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::NonPositiveSigma(sigma));
    }
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / sum).collect())
}

/// Mirror index without repeating the edge sample (`d c b | a b c d`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflect padding, applied per channel.
pub fn gaussian_blur(img: &ImagePlane, sigma: f64) -> Result<ImagePlane> {
    let k = gaussian_kernel(sigma)?;
    let r = (k.len() / 2) as isize;
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let src = img.data();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut s = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let xx = reflect(x as isize + t as isize - r, w);
                    s += kv * src[(y * w + xx) * c + ch];
                }
                tmp[(y * w + x) * c + ch] = s;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut s = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let yy = reflect(y as isize + t as isize - r, h);
                    s += kv * tmp[(yy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = s;
            }
        }
    }
    ImagePlane::from_clamped(h, w, c, out, img.modality())
}

/// Replicates a single channel three times.
pub fn gray_to_3ch(img: &ImagePlane) -> Result<ImagePlane> {
    img.require_channels(1)?;
    let data = img.data().iter().flat_map(|&v| [v, v, v]).collect();
    ImagePlane::new(img.height(), img.width(), 3, data, Modality::Hallucinated)
}

/// One step of a serial pre-processing chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ClassicOp {
    Invert,
    Equalize { bins: usize },
    Stretch,
    Blur { sigma: f64 },
}

impl ClassicOp {
    pub fn apply(&self, img: &ImagePlane) -> Result<ImagePlane> {
        match *self {
            ClassicOp::Invert => invert(img),
            ClassicOp::Equalize { bins } => hist_equalize(img, bins),
            ClassicOp::Stretch => hist_stretch(img),
            ClassicOp::Blur { sigma } => gaussian_blur(img, sigma),
        }
    }

    fn key(&self) -> &'static str {
        match self {
            ClassicOp::Invert => "invert",
            ClassicOp::Equalize { .. } => "equalize",
            ClassicOp::Stretch => "stretch",
            ClassicOp::Blur { .. } => "blur",
        }
    }
}

/// Applies `ops` left to right.
pub fn compose_chain(ops: &[ClassicOp], img: &ImagePlane) -> Result<ImagePlane> {
    ops.iter().try_fold(img.clone(), |acc, op| op.apply(&acc))
}

/// Three differently pre-processed copies stacked as channels:
/// R = stretch after invert, G = equalize after invert, B = blur.
pub fn parallel_combination(img: &ImagePlane, sigma: f64, bins: usize) -> Result<ImagePlane> {
    img.require_channels(1)?;
    let r = compose_chain(&[ClassicOp::Invert, ClassicOp::Stretch], img)?;
    let g = compose_chain(&[ClassicOp::Invert, ClassicOp::Equalize { bins }], img)?;
    let b = gaussian_blur(img, sigma)?;
    let data = r
        .data()
        .iter()
        .zip(g.data())
        .zip(b.data())
        .flat_map(|((&r, &g), &b)| [r, g, b])
        .collect();
    ImagePlane::new(img.height(), img.width(), 3, data, Modality::Hallucinated)
}

/// A classical IR-to-3-channel translation, addressable by a canonical key
/// such as `"gray"`, `"invert+stretch+blur"` or `"parallel"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ClassicMethod {
    /// A serial chain followed by channel replication; empty = raw gray.
    Chain(Vec<ClassicOp>),
    Parallel { sigma: f64, bins: usize },
}

impl ClassicMethod {
    /// The Table-style baseline rows, in report order.
    pub const TABLE_KEYS: [&'static str; 9] = [
        "blur",
        "equalize",
        "stretch",
        "invert",
        "invert+equalize",
        "invert+equalize+blur",
        "invert+stretch",
        "invert+stretch+blur",
        "parallel",
    ];

    pub fn gray() -> Self {
        ClassicMethod::Chain(Vec::new())
    }

    pub fn parse_with(key: &str, sigma: f64, bins: usize) -> Result<Self> {
        let key = key.trim().to_ascii_lowercase();
        match key.as_str() {
            "gray" | "none" | "identity" => return Ok(Self::gray()),
            "parallel" => return Ok(ClassicMethod::Parallel { sigma, bins }),
            _ => {}
        }
        let ops = key
            .split('+')
            .map(|part| match part.trim() {
                "invert" => Ok(ClassicOp::Invert),
                "equalize" | "equalization" => Ok(ClassicOp::Equalize { bins }),
                "stretch" | "stretching" => Ok(ClassicOp::Stretch),
                "blur" => Ok(ClassicOp::Blur { sigma }),
                _ => Err(Error::UnknownMethod(key.clone())),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ClassicMethod::Chain(ops))
    }

    pub fn apply(&self, ir: &ImagePlane) -> Result<ImagePlane> {
        match self {
            ClassicMethod::Chain(ops) => gray_to_3ch(&compose_chain(ops, ir)?),
            ClassicMethod::Parallel { sigma, bins } => parallel_combination(ir, *sigma, *bins),
        }
    }
}

impl FromStr for ClassicMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse_with(s, DEFAULT_SIGMA, DEFAULT_BINS)
    }
}

impl fmt::Display for ClassicMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassicMethod::Chain(ops) if ops.is_empty() => f.write_str("gray"),
            ClassicMethod::Chain(ops) => {
                let keys: Vec<&str> = ops.iter().map(ClassicOp::key).collect();
                f.write_str(&keys.join("+"))
            }
            ClassicMethod::Parallel { .. } => f.write_str("parallel"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> ImagePlane {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        ImagePlane::new(h, w, 1, data, Modality::Ir).unwrap()
    }

    fn natural() -> ImagePlane {
        gray(24, 32, |y, x| {
            let v = 0.5 + 0.3 * ((x as f64) * 0.4).sin() * ((y as f64) * 0.25).cos();
            if (10..16).contains(&y) && (8..12).contains(&x) { 0.95 } else { v }
        })
    }

    #[test]
    fn invert_examples() {
        let z = gray(3, 4, |_, _| 0.0);
        assert!(invert(&z).unwrap().data().iter().all(|&v| v == 1.0));
        assert_eq!(invert(&gray(1, 1, |_, _| 0.25)).unwrap().data(), &[0.75]);
        let rgb = ImagePlane::filled(2, 2, Modality::Rgb, 0.5).unwrap();
        assert!(matches!(invert(&rgb), Err(Error::WrongChannelCount { .. })));
    }

    #[test]
    fn equalize_examples() {
        let c = gray(4, 4, |_, _| 0.3);
        assert_eq!(hist_equalize(&c, 256).unwrap(), c);

        let two = gray(4, 4, |y, _| if y < 2 { 0.0 } else { 1.0 });
        let out = hist_equalize(&two, 256).unwrap();
        for (a, b) in two.data().iter().zip(out.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn equalize_uniform_input_stays_near_uniform() {
        let bins = 16;
        // Four pixels at the centre of every bin.
        let img = gray(4, bins, |_, x| (x as f64 + 0.5) / bins as f64);
        let out = hist_equalize(&img, bins).unwrap();
        let mut counts = vec![0usize; bins];
        for &v in out.data() {
            counts[bin_of(v, bins)] += 1;
        }
        let n = out.data().len() as f64;
        for k in counts {
            assert!((k as f64 / n - 1.0 / bins as f64).abs() <= 2.0 / bins as f64);
        }
    }

    #[test]
    fn stretch_examples() {
        let img = gray(1, 3, |_, x| [0.2, 0.4, 0.6][x]);
        let out = hist_stretch(&img).unwrap();
        assert!((out.data()[1] - 0.5).abs() < 1e-15);
        assert_eq!(out.data()[0], 0.0);
        assert_eq!(out.data()[2], 1.0);
        let c = gray(2, 2, |_, _| 0.7);
        assert_eq!(hist_stretch(&c).unwrap(), c);
    }

    #[test]
    fn blur_examples() {
        let c = gray(9, 11, |_, _| 0.37);
        for v in gaussian_blur(&c, 1.5).unwrap().data() {
            assert!((v - 0.37).abs() < 1e-12);
        }
        let (h, w) = (15, 15);
        let imp = gray(h, w, |y, x| if y == 7 && x == 7 { 1.0 } else { 0.0 });
        let out = gaussian_blur(&imp, 1.0).unwrap();
        let k = gaussian_kernel(1.0).unwrap();
        assert_eq!(k.len(), 7);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for dy in 0..7 {
            for dx in 0..7 {
                let v = out.get(4 + dy, 4 + dx, 0);
                assert!((v - k[dy] * k[dx]).abs() < 1e-15);
            }
        }
        assert!((out.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(matches!(gaussian_blur(&c, 0.0), Err(Error::NonPositiveSigma(_))));
        assert!(gaussian_blur(&c, f64::NAN).is_err());
    }

    #[test]
    fn blur_handles_tiny_canvases() {
        let img = gray(1, 2, |_, x| x as f64);
        let out = gaussian_blur(&img, 3.0).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(4, 4), 2);
        assert_eq!(reflect(-7, 4), 1);
    }

    #[test]
    fn chain_examples() {
        let img = natural();
        assert_eq!(compose_chain(&[ClassicOp::Invert], &img).unwrap(), invert(&img).unwrap());
        assert_eq!(compose_chain(&[ClassicOp::Invert, ClassicOp::Invert], &img).unwrap(), img);
        let manual = hist_stretch(&invert(&img).unwrap()).unwrap();
        assert_eq!(
            compose_chain(&[ClassicOp::Invert, ClassicOp::Stretch], &img).unwrap(),
            manual
        );
    }

    #[test]
    fn gray_to_3ch_replicates() {
        let img = natural();
        let out = gray_to_3ch(&img).unwrap();
        assert_eq!(out.channels(), 3);
        assert_eq!(out.modality(), Modality::Hallucinated);
        for c in 0..3 {
            assert_eq!(out.channel(c), img.data());
        }
    }

    #[test]
    fn parallel_examples() {
        let c = gray(5, 5, |_, _| 0.4);
        let out = parallel_combination(&c, 1.0, 256).unwrap();
        for ch in 0..3 {
            let v = out.channel(ch);
            assert!(v.iter().all(|x| (x - v[0]).abs() < 1e-12));
        }
        let img = natural();
        let out = parallel_combination(&img, 1.0, 256).unwrap();
        let r = compose_chain(&[ClassicOp::Invert, ClassicOp::Stretch], &img).unwrap();
        assert_eq!(out.channel(0), r.data());
        assert_ne!(out.channel(0), out.channel(1));
        assert_ne!(out.channel(1), out.channel(2));
        assert_ne!(out.channel(0), out.channel(2));
    }

    #[test]
    fn keys_round_trip() {
        for key in ClassicMethod::TABLE_KEYS {
            let m: ClassicMethod = key.parse().unwrap();
            assert_eq!(m.to_string(), key);
        }
        assert_eq!("gray".parse::<ClassicMethod>().unwrap().to_string(), "gray");
        assert!("invert+sharpen".parse::<ClassicMethod>().is_err());
    }

    fn arb_image() -> impl Strategy<Value = ImagePlane> {
        (2usize..12, 2usize..12).prop_flat_map(|(h, w)| {
            proptest::collection::vec(0.0..=1.0f64, h * w)
                .prop_map(move |d| ImagePlane::new(h, w, 1, d, Modality::Ir).unwrap())
        })
    }

    proptest! {
        #[test]
        fn invert_is_involution(img in arb_image()) {
            prop_assert_eq!(invert(&invert(&img).unwrap()).unwrap(), img);
        }

        #[test]
        fn stretch_is_idempotent(img in arb_image()) {
            let once = hist_stretch(&img).unwrap();
            let twice = hist_stretch(&once).unwrap();
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn equalize_idempotent_up_to_binning(img in arb_image()) {
            let once = hist_equalize(&img, 256).unwrap();
            let twice = hist_equalize(&once, 256).unwrap();
            for (a, b) in once.data().iter().zip(twice.data()) {
                let (ba, bb) = (bin_of(*a, 256) as i64, bin_of(*b, 256) as i64);
                prop_assert!((ba - bb).abs() <= 1, "{a} -> {b}");
            }
        }

        #[test]
        fn blur_commutes_with_invert(img in arb_image(), sigma in 0.3..2.5f64) {
            let a = gaussian_blur(&invert(&img).unwrap(), sigma).unwrap();
            let b = invert(&gaussian_blur(&img, sigma).unwrap()).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn outputs_stay_in_unit_interval(img in arb_image()) {
            for key in ClassicMethod::TABLE_KEYS {
                let m: ClassicMethod = key.parse().unwrap();
                let out = m.apply(&img).unwrap();
                prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
