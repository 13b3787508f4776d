//! Small patch discriminator kept in its own parameter store.

use osr_autodiff::{Graph, ParamStore, Scalar, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{init_conv, Ctx};
use super::lora::{AdapterSets, LoraRegistry};

pub const WIDTH: usize = 32;

pub fn init<T: Scalar>(seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_conv(&mut store, &mut rng, "disc.c1", 3, WIDTH, 4, false);
    init_conv(&mut store, &mut rng, "disc.c2", WIDTH, 2 * WIDTH, 4, false);
    init_conv(&mut store, &mut rng, "disc.c3", 2 * WIDTH, 1, 3, false);
    store
}

/// Patch logits, `N×1×H/4×W/4`.
pub fn forward<T: Scalar>(store: &ParamStore<T>, g: &mut Graph<T>, x: Var) -> Var {
    let none = LoraRegistry::default();
    let ctx = Ctx {
        store,
        lora: &none,
        active: AdapterSets::NONE,
    };
    let h = ctx.conv(g, x, "disc.c1", 2, 1);
    let h = g.leaky_relu(h, 0.2);
    let h = ctx.conv(g, h, "disc.c2", 2, 1);
    let h = g.leaky_relu(h, 0.2);
    ctx.conv(g, h, "disc.c3", 1, 1)
}

/// Non-saturating generator loss `mean softplus(-D(fake))`.
pub fn generator_loss<T: Scalar>(g: &mut Graph<T>, fake_logits: Var) -> Var {
    let n = g.neg(fake_logits);
    let s = g.softplus(n);
    g.mean_all(s)
}

/// `0.5 · (mean softplus(-D(real)) + mean softplus(D(fake)))`; equals `ln 2` at zero logits.
pub fn discriminator_loss<T: Scalar>(g: &mut Graph<T>, real_logits: Var, fake_logits: Var) -> Var {
    let nr = g.neg(real_logits);
    let lr = g.softplus(nr);
    let lr = g.mean_all(lr);
    let lf = g.softplus(fake_logits);
    let lf = g.mean_all(lf);
    let s = g.add(lr, lf);
    g.scale(s, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use osr_autodiff::Tensor;

    #[test]
    fn zero_logits_give_ln2() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[2, 1, 4, 4]));
        let d = discriminator_loss(&mut g, z, z);
        let gl = generator_loss(&mut g, z);
        assert!((g.value(d).item() - 2f64.ln()).abs() < 1e-12);
        assert!((g.value(gl).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn patch_shape() {
        let store = init::<f32>(1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 64, 64]));
        let y = forward(&store, &mut g, x);
        assert_eq!(g.shape(y), &[2, 1, 16, 16]);
    }
}
