//! Feature-affinity distillation: channel Gram matrices of pooled taps and
//! the losses comparing student against teacher.

use std::fmt;
use std::str::FromStr;

use hkd_tensor::{Element, Tape, Var};

use crate::error::{CoreError, Result};

/// Smoothing added to every affinity entry before row normalisation.
pub const KL_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FaLossKind {
    L2,
    L1,
    Kl,
}

impl fmt::Display for FaLossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FaLossKind::L2 => "l2",
            FaLossKind::L1 => "l1",
            FaLossKind::Kl => "kl",
        })
    }
}

impl FromStr for FaLossKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(FaLossKind::L2),
            "l1" => Ok(FaLossKind::L1),
            "kl" => Ok(FaLossKind::Kl),
            other => Err(CoreError::Config(format!("unknown FA loss {other:?}; expected l2, l1 or kl"))),
        }
    }
}

/// What the L2/L1 distances compare.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FaForm {
    /// Channel affinity matrices of the pooled taps.
    Affinity,
    /// The tap tensors themselves, pixel by pixel.
    Pixel,
}

impl fmt::Display for FaForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FaForm::Affinity => "affinity",
            FaForm::Pixel => "pixel",
        })
    }
}

impl FromStr for FaForm {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "affinity" => Ok(FaForm::Affinity),
            "pixel" => Ok(FaForm::Pixel),
            other => Err(CoreError::Config(format!("unknown FA form {other:?}"))),
        }
    }
}

/// Scaling of the Gram product before the L2/L1 distance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GramScale {
    /// `F·Fᵀ` as is; entries grow with the pooled area.
    Raw,
    /// `F·Fᵀ / (H'·W')`, independent of image size.
    Mean,
}

impl fmt::Display for GramScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GramScale::Raw => "raw",
            GramScale::Mean => "mean",
        })
    }
}

impl FromStr for GramScale {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(GramScale::Raw),
            "mean" => Ok(GramScale::Mean),
            other => Err(CoreError::Config(format!("unknown Gram scale {other:?}; expected raw or mean"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaLossConfig {
    pub kind: FaLossKind,
    pub w_fa: f64,
    /// Per-dimension pooling factor applied before the Gram product.
    pub pool_factor: f64,
    pub form: FaForm,
    pub gram_scale: GramScale,
}

impl Default for FaLossConfig {
    fn default() -> Self {
        Self {
            kind: FaLossKind::L2,
            w_fa: 0.25,
            pool_factor: 0.25,
            form: FaForm::Affinity,
            gram_scale: GramScale::Raw,
        }
    }
}

impl FaLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_fa >= 0.0 && self.w_fa.is_finite()) {
            return Err(CoreError::Config(format!("w_fa must be a non-negative number, got {}", self.w_fa)));
        }
        if !(self.pool_factor > 0.0 && self.pool_factor <= 1.0) {
            return Err(CoreError::Config(format!("pool factor must be in (0, 1], got {}", self.pool_factor)));
        }
        if self.kind == FaLossKind::Kl && self.form == FaForm::Pixel {
            return Err(CoreError::Config("the KL loss is defined on affinity matrices only".into()));
        }
        Ok(())
    }
}

/// `B × C × C` Gram matrix `F·Fᵀ` of the tap pooled by `pool_factor` per
/// dimension and flattened to `B × C × (H'·W')`.
pub fn affinity<T: Element>(tape: &mut Tape<T>, tap: Var, pool_factor: f64) -> Result<Var> {
    scaled_affinity(tape, tap, pool_factor, GramScale::Raw)
}

/// [`affinity`] followed by the configured [`GramScale`].
pub fn scaled_affinity<T: Element>(tape: &mut Tape<T>, tap: Var, pool_factor: f64, scale: GramScale) -> Result<Var> {
    let pooled = tape.avg_pool2d(tap, pool_factor)?;
    let area: usize = tape.shape(pooled)[2..].iter().product();
    let flat = tape.flatten_spatial(pooled)?;
    let flat_t = tape.transpose_last2(flat)?;
    let gram = tape.batched_matmul(flat, flat_t)?;
    Ok(match scale {
        GramScale::Raw => gram,
        GramScale::Mean => tape.mul_scalar(gram, 1.0 / area as f64),
    })
}

/// `KL(H ‖ C)` between row distributions of two affinity matrices, averaged
/// over rows and batch. Rows are taken in absolute value, smoothed by
/// [`KL_EPS`] and normalised to sum to one.
pub fn fa_loss_kl<T: Element>(tape: &mut Tape<T>, h: Var, c: Var) -> Result<Var> {
    check_same(tape, h, c, "fa_loss_kl")?;
    let rows: usize = tape.shape(h)[..tape.shape(h).len() - 1].iter().product();
    let hp = normalized_rows(tape, h)?;
    let cp = normalized_rows(tape, c)?;
    let lh = tape.log(hp);
    let lc = tape.log(cp);
    let ratio = tape.sub(lh, lc)?;
    let terms = tape.hadamard(hp, ratio)?;
    let total = tape.sum(terms);
    Ok(tape.mul_scalar(total, 1.0 / rows as f64))
}

fn normalized_rows<T: Element>(tape: &mut Tape<T>, g: Var) -> Result<Var> {
    let a = tape.abs(g);
    Ok(tape.row_normalize(a, KL_EPS)?)
}

/// Mean squared (`L2`) or absolute (`L1`) elementwise difference. On
/// `B × C × C` affinity matrices this is the per-item sum scaled by
/// `1/(C·C)`, averaged over the batch.
pub fn distance<T: Element>(tape: &mut Tape<T>, h: Var, c: Var, kind: FaLossKind) -> Result<Var> {
    check_same(tape, h, c, "distance")?;
    let d = tape.sub(h, c)?;
    let e = match kind {
        FaLossKind::L2 => tape.square(d),
        FaLossKind::L1 => tape.abs(d),
        FaLossKind::Kl => return Err(CoreError::Usage("KL is not an elementwise distance".into())),
    };
    Ok(tape.mean(e))
}

/// Pixel-level distance between two taps of identical shape.
pub fn fa_loss_pixel<T: Element>(tape: &mut Tape<T>, h: Var, c: Var, kind: FaLossKind) -> Result<Var> {
    distance(tape, h, c, kind)
}

fn check_same<T: Element>(tape: &Tape<T>, a: Var, b: Var, op: &'static str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(hkd_tensor::TensorError::Dimension {
            op,
            detail: format!("student {:?} vs teacher {:?}", tape.shape(a), tape.shape(b)),
        }
        .into());
    }
    Ok(())
}

/// One distillation term between a student tap and its paired teacher tap.
pub fn fa_term<T: Element>(tape: &mut Tape<T>, student: Var, teacher: Var, cfg: &FaLossConfig) -> Result<Var> {
    match (cfg.form, cfg.kind) {
        (FaForm::Pixel, FaLossKind::Kl) => Err(CoreError::Config("the KL loss is defined on affinity matrices only".into())),
        (FaForm::Pixel, kind) => fa_loss_pixel(tape, student, teacher, kind),
        (FaForm::Affinity, kind) => {
            let hs = scaled_affinity(tape, student, cfg.pool_factor, cfg.gram_scale)?;
            let ct = scaled_affinity(tape, teacher, cfg.pool_factor, cfg.gram_scale)?;
            match kind {
                FaLossKind::Kl => fa_loss_kl(tape, hs, ct),
                other => distance(tape, hs, ct, other),
            }
        }
    }
}

/// `L_mse + w_fa · mean(fa_terms)`; with no terms this is `L_mse` itself.
pub fn total_loss<T: Element>(tape: &mut Tape<T>, l_mse: Var, fa_terms: &[Var], cfg: &FaLossConfig) -> Result<Var> {
    for &v in std::iter::once(&l_mse).chain(fa_terms) {
        let x = tape.value(v).item()?.as_f64();
        if !(x >= 0.0 && x.is_finite()) {
            return Err(CoreError::Domain(format!("loss terms must be finite and non-negative, got {x}")));
        }
    }
    if fa_terms.is_empty() || cfg.w_fa == 0.0 {
        return Ok(l_mse);
    }
    let mut acc = fa_terms[0];
    for &t in &fa_terms[1..] {
        acc = tape.add(acc, t)?;
    }
    let weighted = tape.mul_scalar(acc, cfg.w_fa / fa_terms.len() as f64);
    Ok(tape.add(l_mse, weighted)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_parsing() {
        assert_eq!("KL".parse::<FaLossKind>().unwrap(), FaLossKind::Kl);
        assert_eq!(FaLossKind::L1.to_string(), "l1");
        assert!("l3".parse::<FaLossKind>().is_err());
    }

    #[test]
    fn config_rules() {
        assert!(FaLossConfig::default().validate().is_ok());
        assert_eq!(FaLossConfig::default().w_fa, 0.25);
        let bad = FaLossConfig { w_fa: -1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let kl_pixel = FaLossConfig { kind: FaLossKind::Kl, form: FaForm::Pixel, ..Default::default() };
        assert!(kl_pixel.validate().is_err());
    }
}
