//! Frozen graph-encoder embeddings.
//!
//! Systems carry either per-atom `C x M` matrices or an already pooled
//! vector of length `C * M`. Per-atom matrices are flattened row-major and
//! max-pooled across atoms to give one vector per system.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::structures::{neighbor_pairs, AtomicStructure};

/// One atom: `C` rows (spherical channels) of `M` harmonic components.
pub type AtomEmbedding = Vec<Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    File,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SystemEmbedding {
    Atoms(Vec<AtomEmbedding>),
    Pooled(Vec<f64>),
}

impl SystemEmbedding {
    pub fn pooled(&self) -> Result<Vec<f64>> {
        match self {
            Self::Atoms(a) => pool_system_embedding(a),
            Self::Pooled(p) => Ok(p.clone()),
        }
    }

    fn pooled_len(&self) -> usize {
        match self {
            Self::Atoms(a) => a.first().map_or(0, |m| m.len() * m.first().map_or(0, Vec::len)),
            Self::Pooled(p) => p.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphEmbeddingSet {
    entries: Vec<(String, SystemEmbedding)>,
    index: HashMap<String, usize>,
    pub provenance: Provenance,
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingLine {
    system_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    atoms: Option<Vec<AtomEmbedding>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pooled: Option<Vec<f64>>,
}

fn check_atoms(atoms: &[AtomEmbedding]) -> Result<(usize, usize)> {
    let first = atoms
        .first()
        .ok_or_else(|| Error::invalid("atoms", "system has no atom embeddings"))?;
    let c = first.len();
    let m = first.first().map_or(0, Vec::len);
    if c == 0 || m == 0 {
        return Err(Error::invalid("atoms", "empty atom embedding"));
    }
    for (k, a) in atoms.iter().enumerate() {
        if a.len() != c || a.iter().any(|row| row.len() != m) {
            return Err(Error::invalid(
                "atoms",
                format!("atom {k} is not {c} x {m} like atom 0"),
            ));
        }
        if a.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("atoms", format!("atom {k} has a non-finite value")));
        }
    }
    Ok((c, m))
}

impl GraphEmbeddingSet {
    pub fn new(provenance: Provenance) -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
            provenance,
        }
    }

    pub fn insert(&mut self, system_id: String, emb: SystemEmbedding) -> Result<()> {
        if self.index.contains_key(&system_id) {
            return Err(Error::invalid("system_id", format!("duplicate system `{system_id}`")));
        }
        match &emb {
            SystemEmbedding::Atoms(a) => {
                check_atoms(a)?;
            }
            SystemEmbedding::Pooled(p) => {
                if p.is_empty() || p.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid("pooled", "empty or non-finite pooled vector"));
                }
            }
        }
        if let Some(d) = self.pooled_dim() {
            if emb.pooled_len() != d {
                return Err(Error::invalid(
                    "atoms",
                    format!("pooled length {} differs from {d}", emb.pooled_len()),
                ));
            }
        }
        self.index.insert(system_id.clone(), self.entries.len());
        self.entries.push((system_id, emb));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pooled_dim(&self) -> Option<usize> {
        self.entries.first().map(|(_, e)| e.pooled_len())
    }

    pub fn get(&self, system_id: &str) -> Option<&SystemEmbedding> {
        self.index.get(system_id).map(|&i| &self.entries[i].1)
    }

    pub fn pooled(&self, system_id: &str) -> Option<Result<Vec<f64>>> {
        self.get(system_id).map(SystemEmbedding::pooled)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }

    pub fn to_jsonl(&self) -> String {
        jsonl::to_string(self.entries.iter().map(|(id, e)| match e {
            SystemEmbedding::Atoms(a) => EmbeddingLine {
                system_id: id.clone(),
                atoms: Some(a.clone()),
                pooled: None,
            },
            SystemEmbedding::Pooled(p) => EmbeddingLine {
                system_id: id.clone(),
                atoms: None,
                pooled: Some(p.clone()),
            },
        }))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        numerics::write_atomic(path, self.to_jsonl().as_bytes())?;
        Ok(())
    }
}

pub fn parse_atom_embeddings(text: &str) -> Result<GraphEmbeddingSet> {
    let lines = jsonl::parse_lines(text, |l: EmbeddingLine| Ok(l))?;
    let mut set = GraphEmbeddingSet::new(Provenance::File);
    let mut form: Option<bool> = None;
    for (i, line) in lines.into_iter().enumerate() {
        let line_no = i + 1;
        let (is_atoms, emb) = match (line.atoms, line.pooled) {
            (Some(a), None) => (true, SystemEmbedding::Atoms(a)),
            (None, Some(p)) => (false, SystemEmbedding::Pooled(p)),
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    message: "exactly one of `atoms` or `pooled` is required".into(),
                })
            }
        };
        if form.is_some_and(|f| f != is_atoms) {
            return Err(Error::Parse {
                line: line_no,
                message: "per-atom and pooled forms are mixed in one file".into(),
            });
        }
        form = Some(is_atoms);
        set.insert(line.system_id, emb).map_err(|e| e.at_line(line_no))?;
    }
    Ok(set)
}

/// Read a graph-embedding JSONL file.
pub fn load_atom_embeddings(path: &Path) -> Result<GraphEmbeddingSet> {
    parse_atom_embeddings(&std::fs::read_to_string(path)?)
}

/// Flatten each atom matrix row-major and take the elementwise maximum.
pub fn pool_system_embedding(atoms: &[AtomEmbedding]) -> Result<Vec<f64>> {
    check_atoms(atoms)?;
    let mut out: Vec<f64> = atoms[0].iter().flatten().copied().collect();
    for a in &atoms[1..] {
        for (o, &v) in out.iter_mut().zip(a.iter().flatten()) {
            if v > *o {
                *o = v;
            }
        }
    }
    Ok(out)
}

fn hashed_stream(seed: u64, parts: &[&str]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let d = h.finalize();
    ChaCha8Rng::from_seed(d.into())
}

fn draw(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Deterministic stand-in for a frozen graph encoder.
///
/// Each atom gets an element vector plus a half-weight term keyed on its role
/// and the sorted element list of its bonded neighbours (bond cutoff scale
/// 1.2), so the embedding reflects both composition and binding geometry.
pub fn synthetic_graph_embeddings(
    structures: &[AtomicStructure],
    seed: u64,
    channels: usize,
    harmonics: usize,
) -> Result<GraphEmbeddingSet> {
    if channels == 0 || harmonics == 0 {
        return Err(Error::Precondition("channels and harmonics must be at least 1".into()));
    }
    let width = channels * harmonics;
    let mut element_cache: HashMap<String, Vec<f64>> = HashMap::new();
    let mut set = GraphEmbeddingSet::new(Provenance::Synthetic);
    for s in structures {
        let pairs = neighbor_pairs(s, 1.2)?;
        let mut neighbours = vec![Vec::new(); s.len()];
        for &(i, j) in &pairs {
            neighbours[i].push(s.species[j].as_str());
            neighbours[j].push(s.species[i].as_str());
        }
        let mut atoms = Vec::with_capacity(s.len());
        for (k, nb) in neighbours.iter_mut().enumerate() {
            nb.sort_unstable();
            let el = s.species[k].as_str();
            let base = element_cache
                .entry(el.to_owned())
                .or_insert_with(|| draw(&mut hashed_stream(seed, &["element", el]), width));
            let tag = s.tags[k].code().to_string();
            let env_key = nb.join(",");
            let env = draw(&mut hashed_stream(seed, &["env", el, &tag, &env_key]), width);
            let flat: Vec<f64> = base.iter().zip(&env).map(|(b, e)| b + 0.5 * e).collect();
            atoms.push(flat.chunks(harmonics).map(<[f64]>::to_vec).collect());
        }
        set.insert(s.system_id.clone(), SystemEmbedding::Atoms(atoms))?;
    }
    Ok(set)
}
