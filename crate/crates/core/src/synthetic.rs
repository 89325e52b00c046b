//! Small generated adsorbate/slab corpus for experiments without DFT data.
//!
//! Slabs are a 4 x 4 square surface layer over a subsurface layer sitting in
//! the hollows. One adsorbate sits on a top, bridge or hollow site. Labels are
//! a smooth function of what the text serialization can see (adsorbate,
//! facet, bonded surface elements) plus a small per-system jitter, so a text
//! model can in principle fit them.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::elements::covalent_radius;
use crate::error::Result;
use crate::structures::{interacting_atoms, neighbor_pairs, AtomicStructure, Metadata, Tag, Vec3};

const LATTICE: f64 = 2.8;
const GRID: usize = 4;
const SURFACE_Z: f64 = 10.0;
const SUBSURFACE_Z: f64 = 8.0;
const CELL_Z: f64 = 25.0;
pub const LABEL_JITTER: f64 = 0.01;

const BULKS: &[(&str, &[&str])] = &[
    ("Pt", &["Pt"]),
    ("Pd", &["Pd"]),
    ("Cu", &["Cu"]),
    ("Ni", &["Ni"]),
    ("Ag", &["Ag"]),
    ("Au", &["Au"]),
    ("Rh", &["Rh"]),
    ("Ir", &["Ir"]),
    ("Pt3Ni", &["Pt", "Pt", "Pt", "Ni"]),
    ("PdAg", &["Pd", "Ag"]),
    ("CuZn", &["Cu", "Zn"]),
    ("NiGa", &["Ni", "Ga"]),
    ("Pt3Sn", &["Pt", "Pt", "Pt", "Sn"]),
    ("AuCu", &["Au", "Cu"]),
    ("RhIn", &["Rh", "In"]),
    ("Ru3Co", &["Ru", "Ru", "Ru", "Co"]),
];

/// Adsorbate symbol, its atoms from the binding atom upward, and a base energy.
const ADSORBATES: &[(&str, &[&str], f64)] = &[
    ("*H", &["H"], -0.3),
    ("*O", &["O"], -0.6),
    ("*OH", &["O", "H"], 0.2),
    ("*CO", &["C", "O"], -0.9),
    ("*N", &["N"], 0.5),
    ("*NH2", &["N", "H", "H"], -0.2),
    ("*N2", &["N", "N"], 0.9),
    ("*CH3", &["C", "H", "H", "H"], 0.4),
    ("*CHO", &["C", "H", "O"], -0.1),
    ("*CH2CH3", &["C", "C", "H", "H", "H", "H", "H"], 0.7),
];

const MILLER: &[[i32; 3]] = &[[1, 1, 1], [1, 0, 0], [1, 1, 0], [2, 1, 1], [2, 1, 0]];

/// Per-element contribution of a bonded surface atom.
fn surface_weight(el: &str) -> f64 {
    match el {
        "Pt" => 0.0,
        "Pd" => 0.2,
        "Cu" => 0.3,
        "Ni" => -0.3,
        "Ag" => 0.8,
        "Au" => 0.9,
        "Rh" => -0.4,
        "Ir" => -0.2,
        "Zn" => 0.6,
        "Ga" => 0.5,
        "Sn" => 0.7,
        "In" => 0.6,
        "Ru" => -0.6,
        "Co" => -0.5,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Site {
    Top,
    Bridge,
    Hollow,
}

fn radius(el: &str) -> f64 {
    covalent_radius(el).expect("generator uses known elements")
}

fn slab(rng: &mut ChaCha8Rng, elements: &[&str]) -> (Vec<Vec3>, Vec<String>, Vec<Tag>) {
    let mut positions = Vec::new();
    let mut species = Vec::new();
    let mut tags = Vec::new();
    for (z, tag, shift) in [(SUBSURFACE_Z, Tag::Subsurface, 0.5), (SURFACE_Z, Tag::Surface, 0.0)] {
        for i in 0..GRID {
            for j in 0..GRID {
                positions.push([(i as f64 + shift) * LATTICE, (j as f64 + shift) * LATTICE, z]);
                species.push(elements.choose(rng).expect("nonempty").to_string());
                tags.push(tag);
            }
        }
    }
    (positions, species, tags)
}

/// Index of surface atom `(i, j)` with periodic wrap.
fn surface_index(i: usize, j: usize) -> usize {
    GRID * GRID + (i % GRID) * GRID + (j % GRID)
}

fn place_adsorbate(rng: &mut ChaCha8Rng, atoms: &[&str], species: &[String]) -> Vec<Vec3> {
    let (i, j) = (rng.gen_range(0..GRID), rng.gen_range(0..GRID));
    let site = *[Site::Top, Site::Bridge, Site::Hollow].choose(rng).expect("nonempty");
    let (xy, lateral, members) = match site {
        Site::Top => ([0.0, 0.0], 0.0, vec![surface_index(i, j)]),
        Site::Bridge => (
            [0.5, 0.0],
            0.5 * LATTICE,
            vec![surface_index(i, j), surface_index(i + 1, j)],
        ),
        Site::Hollow => (
            [0.5, 0.5],
            std::f64::consts::FRAC_1_SQRT_2 * LATTICE,
            vec![
                surface_index(i, j),
                surface_index(i + 1, j),
                surface_index(i, j + 1),
                surface_index(i + 1, j + 1),
            ],
        ),
    };
    let r_site = members.iter().map(|&k| radius(&species[k])).fold(0.0, f64::max);
    let bond = radius(atoms[0]) + r_site;
    let height = (bond * bond - lateral * lateral).max(0.8 * 0.8).sqrt();
    let base = [
        (i as f64 + xy[0]) * LATTICE,
        (j as f64 + xy[1]) * LATTICE,
        SURFACE_Z + height,
    ];
    atoms
        .iter()
        .enumerate()
        .map(|(k, _)| [base[0] + 0.25 * k as f64, base[1], base[2] + 1.1 * k as f64])
        .collect()
}

/// Smooth label from the text-visible features of a structure.
pub fn synthetic_label(s: &AtomicStructure) -> Result<f64> {
    let ads_base = ADSORBATES
        .iter()
        .find(|(sym, _, _)| *sym == s.metadata.adsorbate)
        .map_or(0.0, |&(_, _, e)| e);
    let pairs = neighbor_pairs(s, 1.2)?;
    let ia = interacting_atoms(s, &pairs);
    let mean_weight = |els: Vec<&str>| {
        if els.is_empty() {
            0.0
        } else {
            els.iter().map(|e| surface_weight(e)).sum::<f64>() / els.len() as f64
        }
    };
    let n_primary = ia.primary.len() as f64;
    let facet: i32 = s.metadata.miller.iter().sum();
    Ok(ads_base
        + 0.6 * mean_weight(ia.primary_elements())
        + 0.15 * n_primary
        + 0.25 * mean_weight(ia.secondary_elements())
        + 0.05 * facet as f64)
}

/// `n` labeled systems named `syn-0000`, `syn-0001`, ...
pub fn synthetic_structures(n: usize, seed: u64) -> Result<Vec<AtomicStructure>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = [
        [GRID as f64 * LATTICE, 0.0, 0.0],
        [0.0, GRID as f64 * LATTICE, 0.0],
        [0.0, 0.0, CELL_Z],
    ];
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let &(bulk, elements) = BULKS.choose(&mut rng).expect("nonempty");
        let &(ads, ads_atoms, _) = ADSORBATES.choose(&mut rng).expect("nonempty");
        let miller = *MILLER.choose(&mut rng).expect("nonempty");
        let (mut positions, mut species, mut tags) = slab(&mut rng, elements);
        positions.extend(place_adsorbate(&mut rng, ads_atoms, &species));
        species.extend(ads_atoms.iter().map(|e| e.to_string()));
        tags.extend(ads_atoms.iter().map(|_| Tag::Adsorbate));
        let mut s = AtomicStructure {
            system_id: format!("syn-{k:04}"),
            cell,
            positions,
            species,
            tags,
            metadata: Metadata {
                adsorbate: ads.to_string(),
                bulk: bulk.to_string(),
                miller,
            },
            e_sys: None,
            references: None,
            energy_label: None,
            relaxer: None,
        };
        let jitter = rng.gen_range(-LABEL_JITTER..LABEL_JITTER);
        s.energy_label = Some(synthetic_label(&s)? + jitter);
        out.push(s);
    }
    Ok(out)
}

/// Copies of each structure as if relaxed by `relaxers` different models:
/// adsorbate atoms are displaced by up to `max_shift` Å and labels perturbed
/// by up to `LABEL_JITTER`.
pub fn relaxer_variants(
    structures: &[AtomicStructure],
    relaxers: &[&str],
    max_shift: f64,
    seed: u64,
) -> Vec<AtomicStructure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(structures.len() * relaxers.len());
    for s in structures {
        for r in relaxers {
            let mut v = s.clone();
            v.relaxer = Some(r.to_string());
            for (p, t) in v.positions.iter_mut().zip(&v.tags) {
                if *t == Tag::Adsorbate {
                    for c in p.iter_mut() {
                        *c += rng.gen_range(-max_shift..=max_shift);
                    }
                }
            }
            v.energy_label = s.energy_label.map(|e| e + rng.gen_range(-LABEL_JITTER..LABEL_JITTER));
            out.push(v);
        }
    }
    out
}
