//! Fusion of two super-resolved images in the stationary-wavelet domain.
//!
//! One input is distortion-optimized (high PSNR, blurry details), the other
//! perception-optimized (rich but misplaced details). Both are decomposed with
//! an undecimated 2D wavelet transform; the low-frequency band of the first is
//! refined by a small residual CNN ([`lse`]) and every high-frequency band is
//! re-synthesized by style transfer on wavelet coefficients ([`wdst`]) before
//! the inverse transform puts the image back together ([`pipeline`]).
//!
//! Module map:
//!
//! * [`imgcore`]: planes, color images, YCbCr, PNG/PNM I/O
//! * [`wavelet`]: filter banks, `swt2` / `iswt2`
//! * [`features`]: conv/ReLU/pool feature extractor with reverse-mode gradients
//! * [`wdst`]: losses, Gram matrices, L-BFGS, sub-band transfer
//! * [`lse`]: low-frequency enhancement network and its SGD trainer
//! * [`metrics`]: PSNR, SSIM, histograms
//! * [`pipeline`]: end-to-end fusion and the experiment protocols

pub mod error;
pub mod features;
pub mod imgcore;
pub mod lse;
pub mod metrics;
pub mod pipeline;
pub mod wavelet;
pub mod wdst;

pub use error::{Error, Result};
pub use imgcore::{ColorImage, ColorSpace, ImagePlane};
pub use wavelet::{FilterFamily, SubbandPyramid, WaveletFilterPair};
