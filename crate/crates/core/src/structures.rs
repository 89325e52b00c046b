//! Relaxed adsorbate–slab structures: parsing, periodic connectivity,
//! interacting-atom identification and the energy bookkeeping.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::elements::covalent_radius;
use crate::error::{Error, Result};
use crate::jsonl;

pub type Vec3 = [f64; 3];

/// Role code of an atom in the slab model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Tag {
    Subsurface = 0,
    Surface = 1,
    Adsorbate = 2,
}

impl Tag {
    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            0 => Some(Self::Subsurface),
            1 => Some(Self::Surface),
            2 => Some(Self::Adsorbate),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub adsorbate: String,
    pub bulk: String,
    pub miller: [i32; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEnergies {
    pub e_slab: f64,
    pub e_gas: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtomicStructure {
    pub system_id: String,
    /// Lattice vectors as rows.
    pub cell: [Vec3; 3],
    pub positions: Vec<Vec3>,
    pub species: Vec<String>,
    pub tags: Vec<Tag>,
    pub metadata: Metadata,
    pub e_sys: Option<f64>,
    pub references: Option<ReferenceEnergies>,
    pub energy_label: Option<f64>,
    pub relaxer: Option<String>,
}

/// One line of the structure JSONL file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StructureLine {
    pub system_id: String,
    pub cell: [Vec3; 3],
    pub positions: Vec<Vec3>,
    pub species: Vec<String>,
    pub tags: Vec<i64>,
    pub adsorbate: String,
    pub bulk: String,
    pub miller: [i32; 3],
    pub e_sys: Option<f64>,
    pub e_slab: Option<f64>,
    pub e_gas: Option<f64>,
    pub energy_label: Option<f64>,
    pub relaxer: Option<String>,
}

fn det3(m: &[Vec3; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn inverse3(m: &[Vec3; 3]) -> Option<[Vec3; 3]> {
    let d = det3(m);
    if d == 0.0 || !d.is_finite() {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            inv[i][j] = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / d;
        }
    }
    Some(inv)
}

/// Row vector times matrix.
fn vec_mat(v: Vec3, m: &[Vec3; 3]) -> Vec3 {
    let mut out = [0.0; 3];
    for (k, row) in m.iter().enumerate() {
        for c in 0..3 {
            out[c] += v[k] * row[c];
        }
    }
    out
}

impl AtomicStructure {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if n == 0 {
            return Err(Error::invalid("positions", "structure has no atoms"));
        }
        if self.species.len() != n {
            return Err(Error::invalid(
                "species",
                format!("{} entries for {n} atoms", self.species.len()),
            ));
        }
        if self.tags.len() != n {
            return Err(Error::invalid(
                "tags",
                format!("{} entries for {n} atoms", self.tags.len()),
            ));
        }
        if !self.cell.iter().flatten().all(|v| v.is_finite()) || inverse3(&self.cell).is_none() {
            return Err(Error::invalid("cell", "lattice matrix is not invertible"));
        }
        if !self.positions.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::invalid("positions", "non-finite coordinate"));
        }
        if let Some(bad) = self.species.iter().find(|s| covalent_radius(s).is_none()) {
            return Err(Error::invalid("species", format!("unknown element `{bad}`")));
        }
        if !self.metadata.adsorbate.is_empty() && !self.tags.contains(&Tag::Adsorbate) {
            return Err(Error::invalid("tags", "adsorbate named but no atom tagged 2"));
        }
        Ok(())
    }

    /// Perpendicular distances between opposite cell faces.
    pub fn cell_heights(&self) -> Vec3 {
        let [a, b, c] = self.cell;
        let vol = det3(&self.cell).abs();
        [
            vol / norm(cross(b, c)),
            vol / norm(cross(c, a)),
            vol / norm(cross(a, b)),
        ]
    }

    /// Fractional coordinates wrapped into `[0, 1)`.
    pub fn wrapped_fractional(&self) -> Vec<Vec3> {
        let inv = inverse3(&self.cell).expect("validated cell");
        self.positions
            .iter()
            .map(|&p| {
                let f = vec_mat(p, &inv);
                f.map(|x| {
                    let w = x - x.floor();
                    if w >= 1.0 {
                        0.0
                    } else {
                        w
                    }
                })
            })
            .collect()
    }

    pub fn to_line(&self) -> StructureLine {
        StructureLine {
            system_id: self.system_id.clone(),
            cell: self.cell,
            positions: self.positions.clone(),
            species: self.species.clone(),
            tags: self.tags.iter().map(|t| t.code() as i64).collect(),
            adsorbate: self.metadata.adsorbate.clone(),
            bulk: self.metadata.bulk.clone(),
            miller: self.metadata.miller,
            e_sys: self.e_sys,
            e_slab: self.references.map(|r| r.e_slab),
            e_gas: self.references.map(|r| r.e_gas),
            energy_label: self.energy_label,
            relaxer: self.relaxer.clone(),
        }
    }

    /// The stored label, or the configuration energy when all three raw
    /// energies are present.
    pub fn label(&self) -> Option<f64> {
        self.energy_label.or_else(|| {
            let refs = self.references?;
            Some(configuration_energy(self.e_sys?, refs))
        })
    }
}

impl TryFrom<StructureLine> for AtomicStructure {
    type Error = Error;

    fn try_from(line: StructureLine) -> Result<Self> {
        let mut tags = Vec::with_capacity(line.tags.len());
        for (i, &code) in line.tags.iter().enumerate() {
            tags.push(
                Tag::from_code(code)
                    .ok_or_else(|| Error::invalid("tags", format!("atom {i} has tag {code}, expected 0, 1 or 2")))?,
            );
        }
        let references = match (line.e_slab, line.e_gas) {
            (Some(e_slab), Some(e_gas)) => Some(ReferenceEnergies { e_slab, e_gas }),
            _ => None,
        };
        for (field, v) in [
            ("e_sys", line.e_sys),
            ("e_slab", line.e_slab),
            ("e_gas", line.e_gas),
            ("energy_label", line.energy_label),
        ] {
            if v.is_some_and(|x| !x.is_finite()) {
                return Err(Error::invalid(field, "non-finite energy"));
            }
        }
        let s = AtomicStructure {
            system_id: line.system_id,
            cell: line.cell,
            positions: line.positions,
            species: line.species,
            tags,
            metadata: Metadata {
                adsorbate: line.adsorbate,
                bulk: line.bulk,
                miller: line.miller,
            },
            e_sys: line.e_sys,
            references,
            energy_label: line.energy_label,
            relaxer: line.relaxer,
        };
        s.validate()?;
        Ok(s)
    }
}

pub fn parse_structures_str(text: &str) -> Result<Vec<AtomicStructure>> {
    jsonl::parse_lines(text, |l: StructureLine| AtomicStructure::try_from(l))
}

/// Read a structure JSONL file, validating every record.
pub fn parse_structures(path: &Path) -> Result<Vec<AtomicStructure>> {
    jsonl::read_lines(path, |l: StructureLine| AtomicStructure::try_from(l))
}

pub fn write_structures(path: &Path, structures: &[AtomicStructure]) -> Result<()> {
    jsonl::write(path, structures.iter().map(AtomicStructure::to_line))
}

/// Bond threshold for a pair of elements.
pub fn bond_threshold(a: &str, b: &str, cutoff_scale: f64) -> Result<f64> {
    let ra = covalent_radius(a).ok_or_else(|| Error::invalid("species", format!("unknown element `{a}`")))?;
    let rb = covalent_radius(b).ok_or_else(|| Error::invalid("species", format!("unknown element `{b}`")))?;
    Ok(cutoff_scale * (ra + rb))
}

/// The 27 image offsets in `{-1, 0, 1}^3`.
pub fn image_offsets() -> impl Iterator<Item = [f64; 3]> {
    (-1..=1).flat_map(|a| (-1..=1).flat_map(move |b| (-1..=1).map(move |c| [a as f64, b as f64, c as f64])))
}

/// Bonded pairs `(i, j)`, `i < j`, under the minimum-image convention.
///
/// A pair is bonded when its shortest periodic distance is at most
/// `cutoff_scale * (r_cov(i) + r_cov(j))`. Positions are wrapped into the
/// cell first so that every image within the cutoff lies among the 27
/// neighbouring offsets; this requires every threshold to stay below half the
/// smallest cell height.
pub fn neighbor_pairs(s: &AtomicStructure, cutoff_scale: f64) -> Result<Vec<(usize, usize)>> {
    if !(cutoff_scale > 0.0) {
        return Err(Error::Precondition(format!(
            "cutoff_scale must be positive, got {cutoff_scale}"
        )));
    }
    let radii: Vec<f64> = s
        .species
        .iter()
        .map(|sp| covalent_radius(sp).ok_or_else(|| Error::invalid("species", format!("unknown element `{sp}`"))))
        .collect::<Result<_>>()?;
    let max_r = radii.iter().copied().fold(0.0, f64::max);
    let max_cutoff = cutoff_scale * 2.0 * max_r;
    let h_min = s.cell_heights().into_iter().fold(f64::INFINITY, f64::min);
    if max_cutoff >= 0.5 * h_min {
        return Err(Error::Precondition(format!(
            "cutoff {max_cutoff:.3} Å is not below half the minimum cell height ({:.3} Å)",
            0.5 * h_min
        )));
    }

    let frac = s.wrapped_fractional();
    let offsets: Vec<[f64; 3]> = image_offsets().collect();
    let mut pairs = Vec::new();
    for i in 0..frac.len() {
        for j in (i + 1)..frac.len() {
            let thr = cutoff_scale * (radii[i] + radii[j]);
            let thr2 = thr * thr;
            let d = [
                frac[j][0] - frac[i][0],
                frac[j][1] - frac[i][1],
                frac[j][2] - frac[i][2],
            ];
            let bonded = offsets.iter().any(|n| {
                let v = vec_mat([d[0] + n[0], d[1] + n[1], d[2] + n[2]], &s.cell);
                v[0] * v[0] + v[1] * v[1] + v[2] * v[2] <= thr2
            });
            if bonded {
                pairs.push((i, j));
            }
        }
    }
    Ok(pairs)
}

/// Which slab layers may count as interacting atoms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SurfaceScope {
    /// Tags 0 and 1.
    #[default]
    SlabAtoms,
    /// Tag 1 only.
    SurfaceOnly,
}

impl SurfaceScope {
    fn admits(self, tag: Tag) -> bool {
        match self {
            Self::SlabAtoms => tag != Tag::Adsorbate,
            Self::SurfaceOnly => tag == Tag::Surface,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InteractionSummary {
    /// `(element, atom index)` sorted by element then index.
    pub primary: Vec<(String, usize)>,
    pub secondary: Vec<(String, usize)>,
}

impl InteractionSummary {
    pub fn primary_elements(&self) -> Vec<&str> {
        self.primary.iter().map(|(e, _)| e.as_str()).collect()
    }

    pub fn secondary_elements(&self) -> Vec<&str> {
        self.secondary.iter().map(|(e, _)| e.as_str()).collect()
    }
}

pub fn interacting_atoms(s: &AtomicStructure, pairs: &[(usize, usize)]) -> InteractionSummary {
    interacting_atoms_with(s, pairs, SurfaceScope::default())
}

/// Primary atoms are slab atoms bonded to any adsorbate atom; secondary atoms
/// are slab atoms bonded to a primary atom that are not primary themselves.
pub fn interacting_atoms_with(
    s: &AtomicStructure,
    pairs: &[(usize, usize)],
    scope: SurfaceScope,
) -> InteractionSummary {
    let n = s.len();
    let mut adj = vec![Vec::new(); n];
    for &(i, j) in pairs {
        adj[i].push(j);
        adj[j].push(i);
    }
    let eligible = |k: usize| scope.admits(s.tags[k]);

    let primary: BTreeSet<usize> = (0..n)
        .filter(|&k| eligible(k) && adj[k].iter().any(|&o| s.tags[o] == Tag::Adsorbate))
        .collect();
    let secondary: BTreeSet<usize> = primary
        .iter()
        .flat_map(|&p| adj[p].iter().copied())
        .filter(|&k| eligible(k) && !primary.contains(&k))
        .collect();

    let sorted = |set: BTreeSet<usize>| {
        let mut v: Vec<(String, usize)> = set.into_iter().map(|k| (s.species[k].clone(), k)).collect();
        v.sort();
        v
    };
    InteractionSummary {
        primary: sorted(primary),
        secondary: sorted(secondary),
    }
}

/// `e_sys - e_slab - e_gas`.
pub fn configuration_energy(e_sys: f64, refs: ReferenceEnergies) -> f64 {
    e_sys - refs.e_slab - refs.e_gas
}

/// Minimum over configuration energies.
pub fn adsorption_energy(config_energies: &[f64]) -> Result<f64> {
    if config_energies.is_empty() {
        return Err(Error::Precondition(
            "adsorption energy of an empty configuration list".into(),
        ));
    }
    if config_energies.iter().any(|e| !e.is_finite()) {
        return Err(Error::Precondition("non-finite configuration energy".into()));
    }
    Ok(config_energies.iter().copied().fold(f64::INFINITY, f64::min))
}
