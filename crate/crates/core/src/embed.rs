//! Task embedding g: a permutation-invariant summary of an episode's inputs.
//!
//! Each example (support and, when given, target) is encoded by a small MLP;
//! every ordered pair of encodings, self-pairs included, goes through a
//! relation MLP; the relation outputs are summed into one row. The sum uses
//! canonical addend ordering, so reordering examples is invisible down to
//! the bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::feed;
use crate::params::{glorot, ParamLayout, ParameterSet};
use crate::tensor::{concat, Tensor};

pub const DEFAULT_EMBED_DIM: usize = 16;
pub const DEFAULT_RELATION_HIDDEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedderSpec {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub relation_hidden: usize,
}

impl EmbedderSpec {
    pub fn new(input_dim: usize, embed_dim: usize, relation_hidden: usize) -> Result<Self> {
        if input_dim == 0 || embed_dim == 0 || relation_hidden == 0 {
            return Err(Error::contract(format!(
                "embedder dims must be positive: input {input_dim}, embed {embed_dim}, hidden {relation_hidden}"
            )));
        }
        Ok(EmbedderSpec {
            input_dim,
            embed_dim,
            relation_hidden,
        })
    }

    /// Encoder (two layers, shared hidden width) then relation MLP over
    /// concatenated pairs.
    pub fn layout(&self) -> ParamLayout {
        let (d, e, h) = (self.input_dim, self.embed_dim, self.relation_hidden);
        ParamLayout::from_entries(vec![
            ("enc0.w".into(), vec![d, h]),
            ("enc0.b".into(), vec![1, h]),
            ("enc1.w".into(), vec![h, e]),
            ("enc1.b".into(), vec![1, e]),
            ("rel0.w".into(), vec![2 * e, h]),
            ("rel0.b".into(), vec![1, h]),
            ("rel1.w".into(), vec![h, e]),
            ("rel1.b".into(), vec![1, e]),
        ])
    }

    pub fn param_count(&self) -> usize {
        self.layout().total()
    }
}

pub fn init_embedder(spec: &EmbedderSpec, seed: u64) -> Result<ParameterSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParameterSet::new();
    for (name, shape) in spec.layout().iter() {
        let t = if name.ends_with(".b") {
            Tensor::zeros(shape)
        } else {
            Tensor::from_vec(shape, glorot(&mut rng, shape[0], shape[1]))?
        };
        set.push(name, t)?;
    }
    Ok(set)
}

/// Embeds a task from its support inputs and, when present and nonempty,
/// its target inputs. Output shape `[1, E]`. With m pooled examples the
/// relation net is evaluated on all m² ordered pairs.
pub fn embed_task(
    x_support: &Tensor,
    x_target: Option<&Tensor>,
    phi: &ParameterSet,
) -> Result<Tensor> {
    let (n_s, d) = x_support.dim2()?;
    if n_s == 0 {
        return Err(Error::contract("embed_task: empty support set"));
    }
    let x_all = match x_target {
        Some(t) if t.shape().first() != Some(&0) => {
            let (_, dt) = t.dim2()?;
            if dt != d {
                return Err(Error::contract(format!(
                    "embed_task: support dim {d} vs target dim {dt}"
                )));
            }
            concat(&[x_support, t], 0)?
        }
        _ => x_support.clone(),
    };

    let enc = mlp(&x_all, phi, "enc")?;
    let m = enc.rows()?;
    // ordered pair (i, j) lands at row i*m + j
    let left = enc.repeat_rows(m)?;
    let right = enc.tile_rows(m)?;
    let pairs = concat(&[&left, &right], 1)?;
    let rel = mlp(&pairs, phi, "rel")?;
    rel.sum_rows_canonical()
}

fn mlp(x: &Tensor, phi: &ParameterSet, prefix: &str) -> Result<Tensor> {
    let mut pairs = Vec::with_capacity(2);
    for i in 0..2 {
        let w = phi
            .get(&format!("{prefix}{i}.w"))
            .ok_or_else(|| Error::contract(format!("embedder missing {prefix}{i}.w")))?;
        let b = phi
            .get(&format!("{prefix}{i}.b"))
            .ok_or_else(|| Error::contract(format!("embedder missing {prefix}{i}.b")))?;
        pairs.push((w, b));
    }
    feed(x, &pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[n, d], data).unwrap()
    }

    #[test]
    fn output_is_a_single_row() {
        let spec = EmbedderSpec::new(3, 16, 32).unwrap();
        let phi = init_embedder(&spec, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = embed_task(&rand_matrix(&mut rng, 4, 3), None, &phi).unwrap();
        assert_eq!(g.shape(), &[1, 16]);
    }

    #[test]
    fn parameter_count_arithmetic() {
        let spec = EmbedderSpec::new(3, 2, 4).unwrap();
        assert_eq!(spec.param_count(), 12 + 4 + 8 + 2 + 16 + 4 + 8 + 2);
    }

    #[test]
    fn single_example_self_pair_hand_case() {
        let mut phi = ParameterSet::new();
        let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        phi.push("enc0.w", eye.clone()).unwrap();
        phi.push("enc0.b", Tensor::zeros(&[1, 2])).unwrap();
        phi.push("enc1.w", eye.clone()).unwrap();
        phi.push("enc1.b", Tensor::zeros(&[1, 2])).unwrap();
        phi.push("rel0.w", Tensor::from_vec(&[4, 2], vec![1.0; 8]).unwrap())
            .unwrap();
        phi.push("rel0.b", Tensor::zeros(&[1, 2])).unwrap();
        phi.push("rel1.w", eye).unwrap();
        phi.push("rel1.b", Tensor::zeros(&[1, 2])).unwrap();

        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let g = embed_task(&x, None, &phi).unwrap();
        // encoding passes [1, 2] through identities; the lone self-pair
        // [1, 2, 1, 2] sums to 6 in both relation hidden units.
        assert_eq!(g.data(), vec![6.0, 6.0]);
    }

    #[test]
    fn empty_support_is_rejected() {
        let spec = EmbedderSpec::new(3, 4, 4).unwrap();
        let phi = init_embedder(&spec, 0).unwrap();
        assert!(embed_task(&Tensor::zeros(&[0, 3]), None, &phi).is_err());
    }

    #[test]
    fn mismatched_target_dim_is_rejected() {
        let spec = EmbedderSpec::new(3, 4, 4).unwrap();
        let phi = init_embedder(&spec, 0).unwrap();
        let xs = Tensor::zeros(&[2, 3]);
        let xt = Tensor::zeros(&[2, 4]);
        assert!(embed_task(&xs, Some(&xt), &phi).is_err());
    }

    #[test]
    fn absent_and_empty_target_agree_bitwise() {
        let spec = EmbedderSpec::new(3, 4, 5).unwrap();
        let phi = init_embedder(&spec, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs = rand_matrix(&mut rng, 3, 3);
        let a = embed_task(&xs, None, &phi).unwrap();
        let b = embed_task(&xs, Some(&Tensor::zeros(&[0, 3])), &phi).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn example_order_is_invisible_bitwise() {
        let spec = EmbedderSpec::new(4, 6, 8).unwrap();
        let phi = init_embedder(&spec, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = rand_matrix(&mut rng, 5, 4);
        let d = xs.data();
        let shuffled: Vec<f64> = [3, 0, 4, 1, 2]
            .iter()
            .flat_map(|&r: &usize| d[r * 4..(r + 1) * 4].to_vec())
            .collect();
        let a = embed_task(&xs, None, &phi).unwrap();
        let b = embed_task(
            &Tensor::from_vec(&[5, 4], shuffled).unwrap(),
            None,
            &phi,
        )
        .unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    /// Plain-loop reference: encode each row, then evaluate the relation
    /// net on every ordered pair and accumulate.
    #[allow(clippy::needless_range_loop)] // index arithmetic spelled out on purpose
    fn naive_embed(rows: &[Vec<f64>], phi: &ParameterSet, e_dim: usize) -> Vec<f64> {
        let dense = |x: &[f64], w: &Tensor, b: &Tensor, act: bool| -> Vec<f64> {
            let (i_dim, o_dim) = (w.shape()[0], w.shape()[1]);
            assert_eq!(x.len(), i_dim);
            (0..o_dim)
                .map(|o| {
                    let mut acc = b.data()[o];
                    for i in 0..i_dim {
                        acc += x[i] * w.data()[i * o_dim + o];
                    }
                    if act {
                        acc.max(0.0)
                    } else {
                        acc
                    }
                })
                .collect()
        };
        let get = |n: &str| phi.get(n).unwrap().clone();
        let enc: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let h = dense(r, &get("enc0.w"), &get("enc0.b"), true);
                dense(&h, &get("enc1.w"), &get("enc1.b"), false)
            })
            .collect();
        let mut out = vec![0.0; e_dim];
        for ei in &enc {
            for ej in &enc {
                let mut pair = ei.clone();
                pair.extend_from_slice(ej);
                let h = dense(&pair, &get("rel0.w"), &get("rel0.b"), true);
                let r = dense(&h, &get("rel1.w"), &get("rel1.b"), false);
                for (slot, v) in out.iter_mut().zip(&r) {
                    *slot += v;
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_pairwise_reference() {
        let spec = EmbedderSpec::new(3, 4, 6).unwrap();
        let phi = init_embedder(&spec, 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // 5 support + 75 target rows pool into 80 encodings, 6400 pairs.
        let xs = rand_matrix(&mut rng, 5, 3);
        let xt = rand_matrix(&mut rng, 75, 3);
        let fast = embed_task(&xs, Some(&xt), &phi).unwrap();
        let mut rows: Vec<Vec<f64>> = (0..5).map(|r| xs.data()[r * 3..(r + 1) * 3].to_vec()).collect();
        rows.extend((0..75).map(|r| xt.data()[r * 3..(r + 1) * 3].to_vec()));
        let slow = naive_embed(&rows, &phi, 4);
        for (a, b) in fast.data().iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::params::{finite_diff_oracle, grad};
        use crate::tensor::Tape;

        let spec = EmbedderSpec::new(3, 3, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut all = init_embedder(&spec, 29).unwrap();
        all.push("xs", rand_matrix(&mut rng, 3, 3)).unwrap();

        let eval = |p: &ParameterSet| -> crate::error::Result<Tensor> {
            let mut phi = ParameterSet::new();
            for (name, t) in p.iter() {
                if name != "xs" {
                    phi.push(name, t.clone())?;
                }
            }
            Ok(embed_task(p.get("xs").unwrap(), None, &phi)?.sum())
        };

        let tape = Tape::new();
        let tracked = all.tracked(&tape);
        let ad = grad(&eval(&tracked).unwrap(), &tracked, false).unwrap();
        let fd = finite_diff_oracle(|p| eval(p)?.item(), &all, 1e-6).unwrap();
        let (a, f) = (ad.flat_data(), fd.flat_data());
        let diff = a
            .iter()
            .zip(&f)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let norm = f.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
        assert!(diff / norm < 1e-4, "relative error {}", diff / norm);
    }

    #[test]
    fn init_is_deterministic() {
        let spec = EmbedderSpec::new(3, 4, 4).unwrap();
        let a = init_embedder(&spec, 5).unwrap();
        let b = init_embedder(&spec, 5).unwrap();
        let c = init_embedder(&spec, 6).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(!a.bitwise_eq(&c));
    }
}
