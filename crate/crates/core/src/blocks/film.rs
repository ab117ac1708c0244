use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Bound, Init, Linear, Mlp, ParamStore};
use crate::tensor::{Activation, Var};

/// Feature-wise affine conditioning of one block's output.
///
/// `(s, r) = MLP(c⁺)`, `Δf = W_out((1 + r) ⊙ W_in f + s)`, `f ← f + Δf`.
#[derive(Clone, Debug)]
pub struct FilmAdapter {
    pub cond_width: usize,
    pub channels: usize,
    pub hidden: usize,
    pub mlp: Mlp,
    pub w_in: Linear,
    pub w_out: Linear,
}

impl FilmAdapter {
    /// With `zero_init`, the MLP's output layer and `W_out` start at zero so the
    /// adapter is the identity until trained.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cond_width: usize,
        channels: usize,
        act: Activation,
        zero_init: bool,
    ) -> Self {
        let hidden = channels;
        let last = if zero_init { Init::Zeros } else { Init::Xavier };
        let mlp = Mlp::new(
            store,
            rng,
            &format!("{name}.mlp"),
            cond_width,
            hidden,
            2 * hidden,
            act,
            last,
        );
        let w_in = Linear::new(store, rng, &format!("{name}.w_in"), channels, hidden, Init::Xavier);
        let w_out = Linear::new(store, rng, &format!("{name}.w_out"), hidden, channels, last);
        Self {
            cond_width,
            channels,
            hidden,
            mlp,
            w_in,
            w_out,
        }
    }

    /// Shift `s` and scale `r`, each `1 × hidden`.
    pub fn shift_scale<'t>(&self, p: &Bound<'t>, cond: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        if cond.cols() != self.cond_width || cond.rows() != 1 {
            return Err(Error::arg(format!(
                "condition has shape {:?}, adapter expects [1, {}]",
                cond.shape(),
                self.cond_width
            )));
        }
        let sr = self.mlp.forward(p, cond)?;
        Ok((
            sr.slice_cols(0, self.hidden)?,
            sr.slice_cols(self.hidden, 2 * self.hidden)?,
        ))
    }

    pub fn modulate<'t>(&self, p: &Bound<'t>, f: Var<'t>, cond: Var<'t>) -> Result<Var<'t>> {
        if f.cols() != self.channels {
            return Err(Error::arg(format!(
                "adapter expects {} channels, got {}",
                self.channels,
                f.cols()
            )));
        }
        let (s, r) = self.shift_scale(p, cond)?;
        let h = self.w_in.forward(p, f)?.mul_row(&r.add_scalar(1.0)?)?.add_row(&s)?;
        let delta = self.w_out.forward(p, h)?;
        Ok(f.add(&delta)?)
    }
}

/// `c⁺ = [g ; c]` as a `1 × (|g| + |c|)` row.
pub fn build_condition<'t>(g: Var<'t>, c: Option<Var<'t>>) -> Result<Var<'t>> {
    match c {
        Some(c) if c.cols() > 0 => Ok(Var::concat_cols(&[g, c])?),
        _ => Ok(g),
    }
}
