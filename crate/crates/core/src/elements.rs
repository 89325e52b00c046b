//! Covalent radii (Å), Cordero et al. single-bond values as tabulated by
//! common atomistic toolkits.

const COVALENT_RADII: &[(&str, f64)] = &[
    ("H", 0.31),
    ("He", 0.28),
    ("Li", 1.28),
    ("Be", 0.96),
    ("B", 0.84),
    ("C", 0.76),
    ("N", 0.71),
    ("O", 0.66),
    ("F", 0.57),
    ("Ne", 0.58),
    ("Na", 1.66),
    ("Mg", 1.41),
    ("Al", 1.21),
    ("Si", 1.11),
    ("P", 1.07),
    ("S", 1.05),
    ("Cl", 1.02),
    ("Ar", 1.06),
    ("K", 2.03),
    ("Ca", 1.76),
    ("Sc", 1.70),
    ("Ti", 1.60),
    ("V", 1.53),
    ("Cr", 1.39),
    ("Mn", 1.39),
    ("Fe", 1.32),
    ("Co", 1.26),
    ("Ni", 1.24),
    ("Cu", 1.32),
    ("Zn", 1.22),
    ("Ga", 1.22),
    ("Ge", 1.20),
    ("As", 1.19),
    ("Se", 1.20),
    ("Br", 1.20),
    ("Kr", 1.16),
    ("Rb", 2.20),
    ("Sr", 1.95),
    ("Y", 1.90),
    ("Zr", 1.75),
    ("Nb", 1.64),
    ("Mo", 1.54),
    ("Tc", 1.47),
    ("Ru", 1.46),
    ("Rh", 1.42),
    ("Pd", 1.39),
    ("Ag", 1.45),
    ("Cd", 1.44),
    ("In", 1.42),
    ("Sn", 1.39),
    ("Sb", 1.39),
    ("Te", 1.38),
    ("I", 1.39),
    ("Xe", 1.40),
    ("Cs", 2.44),
    ("Ba", 2.15),
    ("La", 2.07),
    ("Ce", 2.04),
    ("Pr", 2.03),
    ("Nd", 2.01),
    ("Pm", 1.99),
    ("Sm", 1.98),
    ("Eu", 1.98),
    ("Gd", 1.96),
    ("Tb", 1.94),
    ("Dy", 1.92),
    ("Ho", 1.92),
    ("Er", 1.89),
    ("Tm", 1.90),
    ("Yb", 1.87),
    ("Lu", 1.87),
    ("Hf", 1.75),
    ("Ta", 1.70),
    ("W", 1.62),
    ("Re", 1.51),
    ("Os", 1.44),
    ("Ir", 1.41),
    ("Pt", 1.36),
    ("Au", 1.36),
    ("Hg", 1.32),
    ("Tl", 1.45),
    ("Pb", 1.46),
    ("Bi", 1.48),
    ("Po", 1.40),
    ("At", 1.50),
    ("Rn", 1.50),
    ("Fr", 2.60),
    ("Ra", 2.21),
    ("Ac", 2.15),
    ("Th", 2.06),
    ("Pa", 2.00),
    ("U", 1.96),
    ("Np", 1.90),
    ("Pu", 1.87),
    ("Am", 1.80),
    ("Cm", 1.69),
];

pub fn covalent_radius(symbol: &str) -> Option<f64> {
    COVALENT_RADII.iter().find(|(s, _)| *s == symbol).map(|&(_, r)| r)
}

pub fn is_element(symbol: &str) -> bool {
    covalent_radius(symbol).is_some()
}

/// Expand a chemical formula such as `*CH2CH3` or `*NH2N(CH3)2` into its
/// element sequence. Leading `*` markers are ignored. Returns `None` on any
/// unrecognized symbol.
pub fn expand_formula(formula: &str) -> Option<Vec<String>> {
    let chars: Vec<char> = formula.trim_start_matches('*').chars().collect();
    let (atoms, rest) = parse_group(&chars, 0)?;
    (rest == chars.len()).then_some(atoms)
}

fn parse_count(chars: &[char], mut i: usize) -> (usize, usize) {
    let start = i;
    while i < chars.len() && chars[i].is_ascii_digit() {
        i += 1;
    }
    let n = if i == start {
        1
    } else {
        chars[start..i].iter().collect::<String>().parse().unwrap_or(1)
    };
    (n, i)
}

fn parse_group(chars: &[char], mut i: usize) -> Option<(Vec<String>, usize)> {
    let mut out = Vec::new();
    while i < chars.len() {
        let c = chars[i];
        if c == ')' {
            break;
        }
        if c == '(' {
            let (inner, j) = parse_group(chars, i + 1)?;
            if chars.get(j) != Some(&')') {
                return None;
            }
            let (n, k) = parse_count(chars, j + 1);
            for _ in 0..n {
                out.extend(inner.iter().cloned());
            }
            i = k;
        } else if c.is_ascii_uppercase() {
            let mut sym = c.to_string();
            let mut j = i + 1;
            while j < chars.len() && chars[j].is_ascii_lowercase() {
                sym.push(chars[j]);
                j += 1;
            }
            if !is_element(&sym) {
                return None;
            }
            let (n, k) = parse_count(chars, j);
            out.extend(std::iter::repeat_n(sym, n));
            i = k;
        } else {
            return None;
        }
    }
    Some((out, i))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formulas_expand() {
        assert_eq!(expand_formula("*CO").unwrap(), ["C", "O"]);
        assert_eq!(expand_formula("*CH2CH3").unwrap(), ["C", "H", "H", "C", "H", "H", "H"]);
        assert_eq!(expand_formula("SrIr2").unwrap(), ["Sr", "Ir", "Ir"]);
        let n = expand_formula("*NH2N(CH3)2").unwrap();
        assert_eq!(n.iter().filter(|s| *s == "C").count(), 2);
        assert_eq!(n.len(), 12);
        assert!(expand_formula("*Xq").is_none());
        assert!(expand_formula("*C(O").is_none());
    }

    #[test]
    fn known_radii() {
        assert_eq!(covalent_radius("C"), Some(0.76));
        assert_eq!(covalent_radius("Pt"), Some(1.36));
        assert_eq!(covalent_radius("Zz"), None);
    }
}
