//! Random instance generators and brute-force oracles shared by the
//! integration tests and the acceptance suite.
#![allow(dead_code)]

use adsorbtext::graphemb::AtomEmbedding;
use adsorbtext::structures::{AtomicStructure, Metadata, Tag, Vec3};
use adsorbtext::tokenizer::{SectionCode, TokenSequence, BOS, PAD, SEP, SPECIALS};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const ELEMENTS: [&str; 10] = ["H", "C", "N", "O", "Pt", "Cu", "Ni", "Fe", "Ag", "S"];

#[derive(Debug, Clone, Copy)]
pub enum CellKind {
    Cubic,
    Orthorhombic,
    Triclinic,
}

pub fn random_cell(rng: &mut ChaCha8Rng, kind: CellKind) -> [Vec3; 3] {
    match kind {
        CellKind::Cubic => {
            let a = rng.gen_range(5.0..10.0);
            [[a, 0.0, 0.0], [0.0, a, 0.0], [0.0, 0.0, a]]
        }
        CellKind::Orthorhombic => [
            [rng.gen_range(5.0..10.0), 0.0, 0.0],
            [0.0, rng.gen_range(5.0..10.0), 0.0],
            [0.0, 0.0, rng.gen_range(5.0..10.0)],
        ],
        CellKind::Triclinic => {
            let (a, b, c) = (
                rng.gen_range(6.0..10.0),
                rng.gen_range(6.0..10.0),
                rng.gen_range(6.0..10.0),
            );
            [
                [a, 0.0, 0.0],
                [rng.gen_range(-0.4..0.4) * a, b, 0.0],
                [rng.gen_range(-0.4..0.4) * a, rng.gen_range(-0.4..0.4) * b, c],
            ]
        }
    }
}

fn heights(cell: &[Vec3; 3]) -> [f64; 3] {
    let cross = |a: Vec3, b: Vec3| {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    };
    let dot = |a: Vec3, b: Vec3| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let vol = dot(cell[0], cross(cell[1], cell[2])).abs();
    let h = |u: Vec3, v: Vec3| vol / dot(cross(u, v), cross(u, v)).sqrt();
    [h(cell[1], cell[2]), h(cell[2], cell[0]), h(cell[0], cell[1])]
}

/// Random structure with fractional coordinates in [-0.5, 1.5) so that
/// wrapping is exercised, plus a cutoff scale that keeps every threshold
/// below half the smallest cell height.
pub fn random_structure(rng: &mut ChaCha8Rng, kind: CellKind, id: usize) -> (AtomicStructure, f64) {
    let cell = random_cell(rng, kind);
    let n = rng.gen_range(2..14);
    let species: Vec<String> = (0..n).map(|_| ELEMENTS.choose(rng).unwrap().to_string()).collect();
    let positions: Vec<Vec3> = (0..n)
        .map(|_| {
            let f: Vec3 = [
                rng.gen_range(-0.5..1.5),
                rng.gen_range(-0.5..1.5),
                rng.gen_range(-0.5..1.5),
            ];
            let mut p = [0.0; 3];
            for (k, row) in cell.iter().enumerate() {
                for c in 0..3 {
                    p[c] += f[k] * row[c];
                }
            }
            p
        })
        .collect();
    let tags: Vec<Tag> = (0..n)
        .map(|i| {
            if i == 0 {
                Tag::Adsorbate
            } else {
                Tag::from_code(rng.gen_range(0..3)).unwrap()
            }
        })
        .collect();
    let max_r = species
        .iter()
        .map(|s| adsorbtext::elements::covalent_radius(s).unwrap())
        .fold(0.0, f64::max);
    let h_min = heights(&cell).into_iter().fold(f64::INFINITY, f64::min);
    let limit = 0.5 * h_min / (2.0 * max_r);
    let scale = rng.gen_range(0.5..0.98) * limit;
    let s = AtomicStructure {
        system_id: format!("rand-{id}"),
        cell,
        positions,
        species,
        tags,
        metadata: Metadata {
            adsorbate: "*X".into(),
            bulk: "Pt".into(),
            miller: [1, 1, 1],
        },
        e_sys: None,
        references: None,
        energy_label: None,
        relaxer: None,
    };
    (s, scale)
}

/// Pairs found by scanning every image in `[-3, 3]^3` on unwrapped Cartesian
/// coordinates.
pub fn brute_force_pairs(s: &AtomicStructure, scale: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..s.len() {
        for j in (i + 1)..s.len() {
            let thr = adsorbtext::structures::bond_threshold(&s.species[i], &s.species[j], scale).unwrap();
            let mut best = f64::INFINITY;
            for a in -3..=3 {
                for b in -3..=3 {
                    for c in -3..=3 {
                        let mut d = [0.0; 3];
                        for k in 0..3 {
                            d[k] = s.positions[j][k] - s.positions[i][k]
                                + a as f64 * s.cell[0][k]
                                + b as f64 * s.cell[1][k]
                                + c as f64 * s.cell[2][k];
                        }
                        best = best.min((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt());
                    }
                }
            }
            if best <= thr {
                out.push((i, j));
            }
        }
    }
    out
}

pub fn random_atoms(rng: &mut ChaCha8Rng, n: usize, channels: usize, harmonics: usize) -> Vec<AtomEmbedding> {
    (0..n)
        .map(|_| {
            (0..channels)
                .map(|_| (0..harmonics).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .collect()
        })
        .collect()
}

/// Per-coordinate maximum over row-major flattened atoms.
pub fn brute_force_pool(atoms: &[AtomEmbedding]) -> Vec<f64> {
    let flat: Vec<Vec<f64>> = atoms.iter().map(|a| a.iter().flatten().copied().collect()).collect();
    (0..flat[0].len())
        .map(|k| {
            let mut m = f64::NEG_INFINITY;
            for row in &flat {
                if row[k] > m {
                    m = row[k];
                }
            }
            m
        })
        .collect()
}

/// A well-formed sequence over `vocab_size` tokens: `<s>`, three sections
/// closed by separators, then padding.
pub fn random_sequence(rng: &mut ChaCha8Rng, vocab_size: usize, max_len: usize, id: usize) -> TokenSequence {
    let used = rng.gen_range(7..=max_len);
    let mut ids = vec![BOS];
    let mut sections = vec![SectionCode::SelfToken];
    let body = used - 1;
    let cut1 = rng.gen_range(2..body - 3);
    let cut2 = rng.gen_range(cut1 + 2..body - 1);
    for k in 0..body {
        let sec = if k < cut1 {
            SectionCode::Adsorbate
        } else if k < cut2 {
            SectionCode::Catalyst
        } else {
            SectionCode::Configuration
        };
        let is_sep = k == cut1 - 1 || k == cut2 - 1;
        ids.push(if is_sep {
            SEP
        } else {
            rng.gen_range(SPECIALS.len()..vocab_size)
        });
        sections.push(sec);
    }
    let mut attention_mask = vec![true; used];
    while ids.len() < max_len {
        ids.push(PAD);
        sections.push(SectionCode::Pad);
        attention_mask.push(false);
    }
    TokenSequence {
        system_id: format!("seq-{id}"),
        ids,
        attention_mask,
        sections,
        label: Some(rng.gen_range(-2.0..2.0)),
        truncated: false,
    }
}

pub mod losses {
    //! End-to-end losses as functions of one parameter tensor, for
    //! finite-difference checks.

    use adsorbtext::encoder::{used_len, EncoderConfig, EncoderModel};
    use adsorbtext::numerics::{
        grad_check, grad_check_extrapolated, numeric_gradient, primitives::random_tensor, Graph, Result, Tensor, Var,
    };
    use adsorbtext::tokenizer::{apply_dynamic_mask, TokenSequence};
    use adsorbtext::training::{contrastive_loss, mlm_loss, regression_loss, LossKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Step of the plain central-difference checks.
    pub const H: f64 = 1e-5;
    /// Coarse step of the extrapolated whole-model checks.
    pub const H_MODEL: f64 = 5e-4;

    /// Query-key scores shift by the same `q . b` for every key, so softmax
    /// makes the gradient wrt the key bias identically zero. A relative
    /// error against zero only measures roundoff; these tensors are checked
    /// in absolute terms by [`zero_gradient_params`] instead.
    pub fn has_zero_gradient(name: &str) -> bool {
        name.ends_with("attn.key.bias")
    }

    pub fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 16,
            max_len: 10,
            vocab_size: 14,
            dropout: 0.0,
            d_graph: 6,
        }
    }

    pub fn tiny_batch(seed: u64) -> Vec<TokenSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..3).map(|i| super::random_sequence(&mut rng, 14, 10, i)).collect()
    }

    /// Replace parameter `k` by `x` and bind the rest as constants.
    fn bind_with(model: &EncoderModel, g: &mut Graph, k: usize, x: Var) -> Vec<Var> {
        let mut p = model.bind_constant(g);
        p[k] = x;
        p
    }

    fn regression(model: &EncoderModel, seqs: &[TokenSequence], g: &mut Graph, p: &[Var]) -> Result<Var> {
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let f = model.forward(g, p, &refs, used_len(&refs), None).map_err(to_num)?;
        let cls = model.cls_rows(g, &f).map_err(to_num)?;
        let pred = model.regression_head(g, p, cls).map_err(to_num)?;
        let targets: Vec<f64> = seqs.iter().map(|t| t.label.unwrap()).collect();
        regression_loss(g, pred, &targets, LossKind::Mse).map_err(to_num)
    }

    fn mlm(model: &EncoderModel, seqs: &[TokenSequence], g: &mut Graph, p: &[Var]) -> Result<Var> {
        let masked: Vec<_> = seqs
            .iter()
            .map(|t| apply_dynamic_mask(t, model.config().vocab_size, 0.4, 7, 0).unwrap())
            .collect();
        let inputs: Vec<&TokenSequence> = masked.iter().map(|m| &m.input).collect();
        let l = used_len(&inputs);
        let f = model.forward(g, p, &inputs, l, None).map_err(to_num)?;
        let logits = model.mlm_head(g, p, f.hidden).map_err(to_num)?;
        let targets: Vec<Option<usize>> = masked.iter().flat_map(|m| m.labels[..l].iter().copied()).collect();
        Ok(mlm_loss(g, logits, &targets)
            .map_err(to_num)?
            .expect("some position masked"))
    }

    fn to_num(e: adsorbtext::Error) -> adsorbtext::numerics::NumericsError {
        adsorbtext::numerics::NumericsError::Invalid(e.to_string())
    }

    /// Worst relative error of the regression loss over every parameter tensor
    /// that receives a gradient.
    pub fn regression_worst(seed: u64) -> (String, f64) {
        let model = EncoderModel::new(tiny_config(), seed).unwrap();
        let seqs = tiny_batch(seed);
        worst_over_params(&model, |m, g, p| regression(m, &seqs, g, p))
    }

    pub fn mlm_worst(seed: u64) -> (String, f64) {
        let model = EncoderModel::new(tiny_config(), seed).unwrap();
        let seqs = tiny_batch(seed);
        worst_over_params(&model, |m, g, p| mlm(m, &seqs, g, p))
    }

    fn worst_over_params<F>(model: &EncoderModel, loss: F) -> (String, f64)
    where
        F: Fn(&EncoderModel, &mut Graph, &[Var]) -> Result<Var>,
    {
        let mut worst = (String::new(), 0.0);
        for (k, name) in model.param_names().iter().enumerate() {
            if has_zero_gradient(name) {
                continue;
            }
            let err = grad_check_extrapolated(
                |g, x| {
                    let p = bind_with(model, g, k, x);
                    loss(model, g, &p)
                },
                &model.params()[k],
                H_MODEL,
            )
            .unwrap();
            if err > worst.1 {
                worst = (name.clone(), err);
            }
        }
        worst
    }

    /// Largest absolute analytic and finite-difference gradient over the
    /// tensors named by [`has_zero_gradient`], for the regression loss.
    pub fn zero_gradient_params(seed: u64) -> (f64, f64) {
        let model = EncoderModel::new(tiny_config(), seed).unwrap();
        let seqs = tiny_batch(seed);
        let (mut analytic, mut numeric) = (0.0f64, 0.0f64);
        for (k, name) in model.param_names().iter().enumerate() {
            if !has_zero_gradient(name) {
                continue;
            }
            let mut g = Graph::new();
            let p = model.bind(&mut g);
            let loss = regression(&model, &seqs, &mut g, &p).unwrap();
            let grads = g.backward(loss).unwrap();
            let a = grads.get(p[k]).unwrap();
            analytic = a.data().iter().fold(analytic, |m, v| m.max(v.abs()));
            let n = numeric_gradient(
                |x| {
                    let mut g = Graph::new();
                    let xv = g.constant(x.clone());
                    let p = bind_with(&model, &mut g, k, xv);
                    let l = regression(&model, &seqs, &mut g, &p)?;
                    g.value(l).item()
                },
                &model.params()[k],
                H_MODEL,
            )
            .unwrap();
            numeric = n.data().iter().fold(numeric, |m, v| m.max(v.abs()));
        }
        (analytic, numeric)
    }

    /// Contrastive loss wrt `N x D` text embeddings at a random point.
    pub fn contrastive_worst(seed: u64, n: usize, d: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = random_tensor(&mut rng, &[n, d]);
        let graph = random_tensor(&mut rng, &[n, d]);
        grad_check(
            |g, x| {
                let lt = g.constant(Tensor::scalar(0.3f64.ln()));
                contrastive_loss(g, x, &graph, lt).map_err(to_num)
            },
            &text,
            H,
        )
        .unwrap()
    }

    /// Contrastive loss wrt the log-temperature.
    pub fn contrastive_tau_worst(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = random_tensor(&mut rng, &[4, 8]);
        let graph = random_tensor(&mut rng, &[4, 8]);
        grad_check(
            |g, lt| {
                let t = g.constant(text.clone());
                contrastive_loss(g, t, &graph, lt).map_err(to_num)
            },
            &Tensor::scalar(0.2f64.ln()),
            H,
        )
        .unwrap()
    }
}

pub mod desk {
    //! Small synthetic corpora and model configurations.

    use adsorbtext::encoder::EncoderConfig;
    use adsorbtext::graphemb::{synthetic_graph_embeddings, GraphEmbeddingSet};
    use adsorbtext::synthetic::synthetic_structures;
    use adsorbtext::textgen::{convert_all, ConvertOptions, TextualRecord};
    use adsorbtext::tokenizer::{build_vocab, encode_all, TokenSequence, Vocabulary};

    pub struct Corpus {
        pub records: Vec<TextualRecord>,
        pub vocab: Vocabulary,
        pub seqs: Vec<TokenSequence>,
        pub graph: GraphEmbeddingSet,
    }

    pub const MAX_LEN: usize = 48;

    pub fn corpus(n: usize, seed: u64) -> Corpus {
        let structures = synthetic_structures(n, seed).unwrap();
        let records = convert_all(&structures, ConvertOptions::default()).unwrap();
        let vocab = build_vocab(&records).unwrap();
        let seqs = encode_all(&records, &vocab, MAX_LEN).unwrap();
        assert!(seqs.iter().all(|t| !t.truncated));
        let graph = synthetic_graph_embeddings(&structures, seed, 8, 8).unwrap();
        Corpus {
            records,
            vocab,
            seqs,
            graph,
        }
    }

    pub fn model_config(vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            d_ff: 64,
            max_len: MAX_LEN,
            vocab_size,
            dropout: 0.0,
            d_graph: 64,
        }
    }
}
