use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SQRT2: f64 = std::f64::consts::SQRT_2;
const FRAC_1_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;

// Analysis low-pass taps of the orthogonal families, Daubechies ordering
// (the minimum-phase root set sits at the end of the list).
const DB2: [f64; 4] = [
    -0.129_409_522_551_260_38,
    0.224_143_868_042_013_38,
    0.836_516_303_737_807_9,
    0.482_962_913_144_534_14,
];

const DB4: [f64; 8] = [
    -0.010_597_401_785_069_032,
    0.032_883_011_666_885_2,
    0.030_841_381_835_560_764,
    -0.187_034_811_719_093_08,
    -0.027_983_769_416_859_854,
    0.630_880_767_929_858_9,
    0.714_846_570_552_915_6,
    0.230_377_813_308_896_5,
];

const COIF2: [f64; 12] = [
    -0.000_720_549_445_520_315_75,
    -0.001_823_208_870_910_934_9,
    0.005_611_434_819_368_618_5,
    0.023_680_171_946_846_4,
    -0.059_434_418_646_428_17,
    -0.076_488_599_078_279_67,
    0.417_005_184_423_233_65,
    0.812_723_635_449_414_5,
    0.386_110_066_822_766_8,
    -0.067_372_554_723_727_27,
    -0.041_464_936_786_872_81,
    0.016_387_336_463_204_213,
];

// Cohen-Daubechies-Feauveau 9/7 pair (bior4.4).
const CDF9: [f64; 9] = [
    0.037_828_455_506_995_46,
    -0.023_849_465_019_380_002,
    -0.110_624_404_418_423_41,
    0.377_402_855_612_653_76,
    0.852_698_679_009_403_4,
    0.377_402_855_612_653_76,
    -0.110_624_404_418_423_41,
    -0.023_849_465_019_380_002,
    0.037_828_455_506_995_46,
];

const CDF7: [f64; 7] = [
    -0.064_538_882_628_938_44,
    -0.040_689_417_609_558_44,
    0.418_092_273_222_212_2,
    0.788_485_616_405_664_4,
    0.418_092_273_222_212_2,
    -0.040_689_417_609_558_44,
    -0.064_538_882_628_938_44,
];

/// The supported filter families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FilterFamily {
    #[serde(rename = "haar")]
    Haar,
    #[serde(rename = "db2")]
    Db2,
    #[serde(rename = "db4")]
    Db4,
    #[serde(rename = "bior2.2")]
    Bior22,
    #[serde(rename = "bior4.4")]
    Bior44,
    #[serde(rename = "rbio2.2")]
    Rbio22,
    #[serde(rename = "coif2")]
    Coif2,
}

impl FilterFamily {
    pub const ALL: [FilterFamily; 7] = [
        FilterFamily::Haar,
        FilterFamily::Db2,
        FilterFamily::Db4,
        FilterFamily::Bior22,
        FilterFamily::Bior44,
        FilterFamily::Rbio22,
        FilterFamily::Coif2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FilterFamily::Haar => "haar",
            FilterFamily::Db2 => "db2",
            FilterFamily::Db4 => "db4",
            FilterFamily::Bior22 => "bior2.2",
            FilterFamily::Bior44 => "bior4.4",
            FilterFamily::Rbio22 => "rbio2.2",
            FilterFamily::Coif2 => "coif2",
        }
    }
}

impl fmt::Display for FilterFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        // "rbior2.2" is a common spelling of the reverse biorthogonal family.
        let lower = if lower == "rbior2.2" {
            "rbio2.2".to_string()
        } else {
            lower
        };
        FilterFamily::ALL
            .into_iter()
            .find(|f| f.name() == lower)
            .ok_or_else(|| {
                let names: Vec<_> = FilterFamily::ALL.iter().map(|f| f.name()).collect();
                Error::config(format!(
                    "unknown wavelet filter {s:?}; supported: {}",
                    names.join(", ")
                ))
            })
    }
}

/// Analysis filters `(h0, g0)` and synthesis filters `(h1, g1)` of one family.
///
/// All four tap lists share one length. Filtering is periodic, so the only
/// alignment data needed are the analysis offset (which tap sits at lag 0)
/// and the end-to-end delay of the analysis/synthesis product.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletFilterPair {
    family: FilterFamily,
    h0: Vec<f64>,
    g0: Vec<f64>,
    h1: Vec<f64>,
    g1: Vec<f64>,
    analysis_offset: usize,
    delay: usize,
}

impl WaveletFilterPair {
    pub fn family(&self) -> FilterFamily {
        self.family
    }

    pub fn name(&self) -> &'static str {
        self.family.name()
    }

    pub fn h0(&self) -> &[f64] {
        &self.h0
    }

    pub fn g0(&self) -> &[f64] {
        &self.g0
    }

    pub fn h1(&self) -> &[f64] {
        &self.h1
    }

    pub fn g1(&self) -> &[f64] {
        &self.g1
    }

    /// Number of taps in each filter (including alignment padding).
    pub fn len(&self) -> usize {
        self.h0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h0.is_empty()
    }

    /// Tap index treated as lag zero by the analysis filters.
    pub fn analysis_offset(&self) -> usize {
        self.analysis_offset
    }

    /// Lag `d` in `H0(z)H1(z) + G0(z)G1(z) = 2 z^-d`.
    pub fn delay(&self) -> usize {
        self.delay
    }

    /// Lag-zero tap for the synthesis filters, chosen so analysis followed by
    /// synthesis has no net shift.
    pub(crate) fn synthesis_offset(&self) -> isize {
        self.delay as isize - self.analysis_offset as isize
    }

    /// Builds a pair from an analysis and a synthesis low-pass filter of the
    /// same length. High-pass filters follow by alternating signs.
    fn from_lowpass(family: FilterFamily, h0: Vec<f64>, h1: Vec<f64>) -> Self {
        assert_eq!(h0.len(), h1.len());
        let sign = |n: usize| if n % 2 == 0 { 1.0 } else { -1.0 };
        let g0: Vec<f64> = h1.iter().enumerate().map(|(n, &v)| sign(n) * v).collect();
        let g1: Vec<f64> = h0.iter().enumerate().map(|(n, &v)| -sign(n) * v).collect();

        let product = pr_product(&h0, &h1, &g0, &g1);
        let delay = product
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .expect("empty filter");

        let energy: f64 = h0.iter().map(|v| v * v).sum();
        let centroid: f64 = h0
            .iter()
            .enumerate()
            .map(|(k, v)| k as f64 * v * v)
            .sum::<f64>()
            / energy;

        Self {
            family,
            h0,
            g0,
            h1,
            g1,
            analysis_offset: centroid.round() as usize,
            delay,
        }
    }

    /// Largest deviation of the filter-bank product from `2 z^-delay`.
    ///
    /// Zero (up to rounding) is the undecimated perfect-reconstruction condition.
    pub fn pr_residual(&self) -> f64 {
        pr_product(&self.h0, &self.h1, &self.g0, &self.g1)
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let target = if i == self.delay { 2.0 } else { 0.0 };
                (v - target).abs()
            })
            .fold(0.0, f64::max)
    }
}

fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn pr_product(h0: &[f64], h1: &[f64], g0: &[f64], g1: &[f64]) -> Vec<f64> {
    convolve(h0, h1)
        .into_iter()
        .zip(convolve(g0, g1))
        .map(|(a, b)| a + b)
        .collect()
}

fn orthogonal(family: FilterFamily, taps: &[f64]) -> WaveletFilterPair {
    let h0 = taps.to_vec();
    let h1: Vec<f64> = taps.iter().rev().copied().collect();
    WaveletFilterPair::from_lowpass(family, h0, h1)
}

fn scaled(taps: &[f64], scale: f64) -> Vec<f64> {
    taps.iter().map(|v| v * scale).collect()
}

/// Spline 5/3 pair; the two centres sit at opposite index parities.
fn bior22_lowpass() -> (Vec<f64>, Vec<f64>) {
    let analysis = scaled(&[0.0, -0.125, 0.25, 0.75, 0.25, -0.125], SQRT2);
    let synthesis = scaled(&[0.0, 0.25, 0.5, 0.25, 0.0, 0.0], SQRT2);
    (analysis, synthesis)
}

fn bior44_lowpass() -> (Vec<f64>, Vec<f64>) {
    let mut analysis = vec![0.0];
    analysis.extend_from_slice(&CDF9);
    let mut synthesis = vec![0.0];
    synthesis.extend_from_slice(&CDF7);
    synthesis.extend_from_slice(&[0.0, 0.0]);
    (analysis, synthesis)
}

/// Returns the filter bank for a family.
pub fn make_filter_pair(family: FilterFamily) -> WaveletFilterPair {
    match family {
        FilterFamily::Haar => orthogonal(family, &[FRAC_1_SQRT2, FRAC_1_SQRT2]),
        FilterFamily::Db2 => orthogonal(family, &DB2),
        FilterFamily::Db4 => orthogonal(family, &DB4),
        FilterFamily::Coif2 => orthogonal(family, &COIF2),
        FilterFamily::Bior22 => {
            let (a, s) = bior22_lowpass();
            WaveletFilterPair::from_lowpass(family, a, s)
        }
        FilterFamily::Rbio22 => {
            let (a, s) = bior22_lowpass();
            WaveletFilterPair::from_lowpass(family, s, a)
        }
        FilterFamily::Bior44 => {
            let (a, s) = bior44_lowpass();
            WaveletFilterPair::from_lowpass(family, a, s)
        }
    }
}

/// Parses a family name and returns its filter bank.
pub fn filter_pair_by_name(name: &str) -> Result<WaveletFilterPair> {
    Ok(make_filter_pair(name.parse()?))
}
