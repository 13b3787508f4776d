//! Text-matching guidance: noun filtering, mask validity, cross-attention aggregation and the
//! positive-area loss that pulls each noun's attention mass inside its mask.

use osr_autodiff::{Graph, Scalar, Tensor, Var};

use crate::dataset::AnnotatedSample;
use crate::error::{Error, Result};
use crate::networks::layers::bilinear_matrix;
use crate::vocab::{token_id, Tag, PROMPT_LEN};

pub const DEFAULT_MASK_THRESHOLD: f64 = 0.005;
const DENOM_EPS: f64 = 1e-8;

/// Nouns of a tagged prompt, in order of first appearance.
pub fn filter_nouns(tagged: &[(String, Tag)]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for (word, tag) in tagged {
        if *tag == Tag::Noun && !out.contains(word) {
            out.push(word.clone());
        }
    }
    out
}

pub fn validate_mask(mask: &[bool], threshold: f64) -> bool {
    if mask.is_empty() {
        return false;
    }
    let active = mask.iter().filter(|&&m| m).count();
    active as f64 / mask.len() as f64 >= threshold
}

/// Area-averages `factor×factor` blocks and keeps cells with coverage ≥ 0.5.
pub fn downsample_mask(mask: &[bool], h: usize, w: usize, factor: usize) -> Result<Vec<bool>> {
    if mask.len() != h * w || factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!("mask of {} cells is not {h}x{w} divisible by {factor}", mask.len())));
    }
    let (ho, wo) = (h / factor, w / factor);
    let area = (factor * factor) as f64;
    Ok((0..ho * wo)
        .map(|i| {
            let (by, bx) = (i / wo, i % wo);
            let mut on = 0usize;
            for y in by * factor..(by + 1) * factor {
                on += mask[y * w + bx * factor..y * w + (bx + 1) * factor].iter().filter(|&&m| m).count();
            }
            on as f64 / area >= 0.5
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NounMask {
    /// Vocabulary id of the noun.
    pub token: usize,
    /// Position of the noun in the prompt token sequence.
    pub slot: usize,
    pub mask: Vec<bool>,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NounMaskSet {
    pub height: usize,
    pub width: usize,
    pub entries: Vec<NounMask>,
}

impl NounMaskSet {
    /// Masks of a sample's nouns at `1/factor` resolution. Slot `i + 1` holds noun `i`,
    /// matching [`crate::vocab::encode_nouns`].
    pub fn from_sample(sample: &AnnotatedSample, factor: usize, threshold: f64) -> Result<Self> {
        let (h, w) = (sample.hq.height(), sample.hq.width());
        let mut entries = Vec::with_capacity(sample.nouns.len());
        for (i, (noun, mask)) in sample.nouns.iter().zip(&sample.masks).enumerate() {
            let small = downsample_mask(mask, h, w, factor)?;
            entries.push(NounMask {
                token: token_id(noun)?,
                slot: i + 1,
                valid: validate_mask(&small, threshold),
                mask: small,
            });
        }
        Ok(Self {
            height: h / factor,
            width: w / factor,
            entries,
        })
    }

    pub fn valid_count(&self) -> usize {
        self.entries.iter().filter(|e| e.valid).count()
    }
}

/// A detached cross-attention map, `cells × tokens` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnLayer {
    pub height: usize,
    pub width: usize,
    pub tokens: usize,
    pub data: Vec<f64>,
}

impl AttnLayer {
    /// Splits a batched `N × cells × tokens` attention value into per-sample layers.
    pub fn from_batch<T: Scalar>(t: &Tensor<T>, height: usize, width: usize) -> Vec<Self> {
        let s = t.shape();
        assert_eq!(s.len(), 3);
        assert_eq!(s[1], height * width);
        let per = s[1] * s[2];
        (0..s[0])
            .map(|n| Self {
                height,
                width,
                tokens: s[2],
                data: t.data()[n * per..(n + 1) * per].iter().map(|v| v.to_f64_lossy()).collect(),
            })
            .collect()
    }
}

/// Mean over layers of the token's attention column, each bilinearly resampled to `h×w`.
pub fn aggregate_attention(layers: &[AttnLayer], prompt: &[usize], token: usize, h: usize, w: usize) -> Result<Vec<f64>> {
    if layers.is_empty() {
        return Err(Error::Domain("no cross-attention layers to aggregate".into()));
    }
    let slot = prompt
        .iter()
        .position(|&t| t == token)
        .ok_or_else(|| Error::Lookup(format!("token {token} not in prompt {prompt:?}")))?;
    let mut out = vec![0.0; h * w];
    for layer in layers {
        if slot >= layer.tokens || layer.data.len() != layer.height * layer.width * layer.tokens {
            return Err(Error::Shape(format!(
                "attention layer {}x{}x{} lacks slot {slot}",
                layer.height, layer.width, layer.tokens
            )));
        }
        let col: Vec<f64> = (0..layer.height * layer.width)
            .map(|p| layer.data[p * layer.tokens + slot])
            .collect();
        let m = bilinear_matrix(layer.height, layer.width, h, w);
        let src = col.len();
        for (o, row) in out.iter_mut().zip(m.chunks(src)) {
            *o += row.iter().zip(&col).map(|(a, b)| a * b).sum::<f64>() / layers.len() as f64;
        }
    }
    Ok(out)
}

/// Graph form of [`aggregate_attention`] for a whole batch: `layers[l]` is `N × cells_l × L`,
/// returns `N × (h·w)` for token position `slot`.
pub fn aggregate_attention_graph<T: Scalar>(
    g: &mut Graph<T>,
    layers: &[Var],
    sizes: &[(usize, usize)],
    slot: usize,
    h: usize,
    w: usize,
) -> Var {
    assert!(!layers.is_empty() && layers.len() == sizes.len());
    let mut acc: Option<Var> = None;
    for (&layer, &(lh, lw)) in layers.iter().zip(sizes) {
        let s = g.shape(layer).to_vec();
        let col = g.narrow(layer, 2, slot, 1);
        let col = g.reshape(col, &[s[0], s[1]]);
        let m = bilinear_matrix(lh, lw, h, w);
        // (cells × h·w) so that col · mᵀ resamples each row
        let mt = Tensor::from_fn(&[lh * lw, h * w], |i| {
            let (src, dst) = (i / (h * w), i % (h * w));
            T::from_f64(m[dst * lh * lw + src])
        });
        let mt = g.constant(mt);
        let r = g.matmul(col, mt);
        acc = Some(match acc {
            Some(a) => g.add(a, r),
            None => r,
        });
    }
    g.scale(acc.expect("non-empty"), 1.0 / layers.len() as f64)
}

/// `Σ_valid (1 − in-mask mass / (total mass + 1e-8)) / #valid` over the rows of `att`
/// (`K × cells`, one row per noun). No valid rows gives a constant zero.
pub fn positive_area_loss<T: Scalar>(g: &mut Graph<T>, att: Var, masks: &[Vec<bool>], valid: &[bool]) -> Var {
    let s = g.shape(att).to_vec();
    assert_eq!(s.len(), 2);
    assert_eq!(masks.len(), s[0]);
    assert_eq!(valid.len(), s[0]);
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return g.constant(Tensor::scalar(T::zero()));
    }
    let mask_t = Tensor::from_fn(&s, |i| {
        let (k, p) = (i / s[1], i % s[1]);
        if masks[k].get(p).copied().unwrap_or(false) {
            T::one()
        } else {
            T::zero()
        }
    });
    let mask_v = g.constant(mask_t);
    let inside = g.mul(att, mask_v);
    let inside = g.sum_axes(inside, &[1]);
    let total = g.sum_axes(att, &[1]);
    let total = g.offset(total, DENOM_EPS);
    let ratio = g.div(inside, total);
    let one_minus = g.neg(ratio);
    let one_minus = g.offset(one_minus, 1.0);
    let weights = g.constant(Tensor::from_fn(&[s[0], 1], |k| if valid[k] { T::one() } else { T::zero() }));
    let terms = g.mul(one_minus, weights);
    let sum = g.sum_all(terms);
    g.scale(sum, 1.0 / n_valid as f64)
}

/// Evaluates [`positive_area_loss`] on plain maps.
pub fn positive_area_loss_value(maps: &[Vec<f64>], masks: &[Vec<bool>], valid: &[bool]) -> Result<f64> {
    if maps.len() != masks.len() || maps.len() != valid.len() || maps.is_empty() {
        return Err(Error::Shape("one map, mask and flag per noun required".into()));
    }
    let cells = maps[0].len();
    if maps.iter().any(|m| m.len() != cells) || masks.iter().any(|m| m.len() != cells) {
        return Err(Error::Shape("maps and masks must share a resolution".into()));
    }
    if maps.iter().flatten().any(|&v| v < 0.0) {
        return Err(Error::Domain("attention maps must be non-negative".into()));
    }
    let mut g = Graph::<f64>::new();
    let att = g.constant(Tensor::from_vec(&[maps.len(), cells], maps.concat()).expect("shape"));
    let l = positive_area_loss(&mut g, att, masks, valid);
    Ok(g.value(l).item())
}

/// Fraction of a map's mass inside `mask`.
pub fn in_mask_fraction(map: &[f64], mask: &[bool]) -> f64 {
    let total: f64 = map.iter().sum();
    let inside: f64 = map.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v).sum();
    inside / (total + DENOM_EPS)
}

/// Prompt token ids for a sample: `[null, nouns…]` padded to [`PROMPT_LEN`].
pub fn sample_tokens(sample: &AnnotatedSample) -> Result<Vec<usize>> {
    crate::vocab::encode_nouns(&sample.nouns)
}

/// Mask rows aligned with prompt slots for a batch: `N·PROMPT_LEN` entries, invalid for the
/// null slot and padding.
pub fn slot_masks(sets: &[NounMaskSet]) -> (Vec<Vec<bool>>, Vec<bool>) {
    let mut masks = Vec::with_capacity(sets.len() * PROMPT_LEN);
    let mut valid = Vec::with_capacity(sets.len() * PROMPT_LEN);
    for set in sets {
        let cells = set.height * set.width;
        for slot in 0..PROMPT_LEN {
            match set.entries.iter().find(|e| e.slot == slot) {
                Some(e) => {
                    masks.push(e.mask.clone());
                    valid.push(e.valid);
                }
                None => {
                    masks.push(vec![false; cells]);
                    valid.push(false);
                }
            }
        }
    }
    (masks, valid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tagged(words: &[(&str, Tag)]) -> Vec<(String, Tag)> {
        words.iter().map(|(w, t)| (w.to_string(), *t)).collect()
    }

    #[test]
    fn filter_examples() {
        assert_eq!(filter_nouns(&tagged(&[("shiny", Tag::Adjective), ("circle", Tag::Noun)])), vec!["circle"]);
        assert!(filter_nouns(&tagged(&[("red", Tag::Adjective), ("dark", Tag::Adjective)])).is_empty());
        assert_eq!(filter_nouns(&tagged(&[("circle", Tag::Noun), ("circle", Tag::Noun)])), vec!["circle"]);
    }

    #[test]
    fn mask_validity_examples() {
        assert!(!validate_mask(&[false; 256], DEFAULT_MASK_THRESHOLD));
        assert!(validate_mask(&[true; 256], DEFAULT_MASK_THRESHOLD));
        let mut one = vec![false; 256];
        one[17] = true;
        assert!(!validate_mask(&one, DEFAULT_MASK_THRESHOLD));
    }

    #[test]
    fn downsample_binarises_at_half() {
        // 4x4 mask, factor 2: blocks with 2, 1, 4, 0 active cells
        let m = [
            true, true, true, false, //
            false, false, false, false, //
            true, true, false, false, //
            true, true, false, false,
        ];
        assert_eq!(downsample_mask(&m, 4, 4, 2).unwrap(), vec![true, false, true, false]);
        assert!(downsample_mask(&m, 4, 4, 3).is_err());
    }

    #[test]
    fn uniform_attention_over_k_tokens() {
        let k = 4;
        let layer = AttnLayer {
            height: 2,
            width: 2,
            tokens: k,
            data: vec![0.25; 4 * k],
        };
        let a = aggregate_attention(&[layer], &[0, 3, 5, 0], 3, 4, 4).unwrap();
        assert!(a.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn two_layers_average() {
        let p: Vec<f64> = (0..8).map(|i| i as f64 / 10.0).collect();
        let q: Vec<f64> = (0..8).map(|i| 1.0 - i as f64 / 20.0).collect();
        let mk = |d: &Vec<f64>| AttnLayer {
            height: 2,
            width: 2,
            tokens: 2,
            data: d.clone(),
        };
        let a = aggregate_attention(&[mk(&p), mk(&q)], &[0, 2], 2, 2, 2).unwrap();
        for c in 0..4 {
            assert!((a[c] - (p[c * 2 + 1] + q[c * 2 + 1]) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn absent_token_is_lookup_error() {
        let layer = AttnLayer {
            height: 1,
            width: 1,
            tokens: 2,
            data: vec![0.5, 0.5],
        };
        assert!(matches!(aggregate_attention(&[layer], &[0, 1], 7, 1, 1), Err(Error::Lookup(_))));
    }

    #[test]
    fn loss_examples() {
        let mask: Vec<bool> = (0..16).map(|i| i < 4).collect();
        let inside: Vec<f64> = (0..16).map(|i| if i < 4 { 0.25 } else { 0.0 }).collect();
        let outside: Vec<f64> = (0..16).map(|i| if i < 4 { 0.0 } else { 1.0 / 12.0 }).collect();
        let uniform = vec![1.0 / 16.0; 16];
        let l = |m: &Vec<f64>| positive_area_loss_value(&[m.clone()], &[mask.clone()], &[true]).unwrap();
        assert!(l(&inside).abs() < 1e-7);
        assert!((l(&outside) - 1.0).abs() < 1e-7);
        assert!((l(&uniform) - 0.75).abs() < 1e-7);
    }

    #[test]
    fn no_valid_nouns_is_a_noop() {
        let mut g = Graph::<f64>::new();
        let att = g.input(Tensor::full(&[2, 4], 0.25));
        let l = positive_area_loss(&mut g, att, &[vec![true; 4], vec![false; 4]], &[false, false]);
        assert_eq!(g.value(l).item(), 0.0);
        let grads = g.backward(l);
        assert!(grads.get(att).map_or(true, |t| t.data().iter().all(|&v| v == 0.0)));
    }
}
