//! SDPA sparse format (`.dat-s`) export and import.
//!
//! The format describes `min c'x` subject to `X = sum_i x_i F_i - F0`,
//! `X` positive semidefinite with a fixed block structure; negative block
//! sizes denote diagonal blocks. A matrix inequality
//! `constant + sum_i v_i C_i <= 0` therefore maps to `F_i = -C_i`,
//! `F0 = constant`, and each scalar inequality `a' v >= lo` becomes one
//! diagonal slot with `F_i = a_i`, `F0 = lo`. Values are rendered with 17
//! significant digits so a written file reads back bit for bit.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::sdp::backend::ConeProblem;
use crate::sdp::FeasibilityProblem;
use crate::{Error, Result};

/// One sparse coefficient, in file coordinates: `mat` 0 is `F0`, matrix
/// and block indices are 1-based, and `(i, j)` is an upper-triangle slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdpaEntry {
    pub mat: usize,
    pub block: usize,
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SdpaProblem {
    pub num_vars: usize,
    /// Positive size: dense PSD block; negative: diagonal block.
    pub block_sizes: Vec<i64>,
    pub objective: Vec<f64>,
    pub entries: Vec<SdpaEntry>,
}

fn push_matrix_entries(
    entries: &mut Vec<SdpaEntry>,
    mat: usize,
    block: usize,
    m: &DMatrix<f64>,
) {
    for j in 0..m.ncols() {
        for i in 0..=j {
            let value = 0.5 * (m[(i, j)] + m[(j, i)]);
            if value != 0.0 {
                entries.push(SdpaEntry {
                    mat,
                    block: block + 1,
                    i: i + 1,
                    j: j + 1,
                    value,
                });
            }
        }
    }
}

/// Rewrites a cone problem in SDPA terms. The quadratic objective weight
/// has no SDPA counterpart and must be zero.
pub fn from_cone(prob: &ConeProblem) -> Result<SdpaProblem> {
    if prob.quad_objective != 0.0 {
        return Err(Error::SdpaFormat(
            "quadratic objectives are not representable".into(),
        ));
    }
    if prob.num_vars == 0 {
        return Err(Error::EmptyProblem("no variables".into()));
    }
    if prob.psd_blocks.is_empty() && prob.lin_ineqs.is_empty() {
        return Err(Error::EmptyProblem("no constraints".into()));
    }

    let mut block_sizes: Vec<i64> = prob.psd_blocks.iter().map(|b| b.dim as i64).collect();
    let lp_block = prob.psd_blocks.len();
    if !prob.lin_ineqs.is_empty() {
        block_sizes.push(-(prob.lin_ineqs.len() as i64));
    }

    let mut objective = vec![0.0; prob.num_vars];
    for &(var, coeff) in &prob.linear_objective {
        objective[var] += coeff;
    }

    let mut entries = Vec::new();
    // F0: block constants and inequality floors.
    for (bi, block) in prob.psd_blocks.iter().enumerate() {
        push_matrix_entries(&mut entries, 0, bi, &block.constant);
    }
    for (row, ineq) in prob.lin_ineqs.iter().enumerate() {
        if ineq.lower != 0.0 {
            entries.push(SdpaEntry {
                mat: 0,
                block: lp_block + 1,
                i: row + 1,
                j: row + 1,
                value: ineq.lower,
            });
        }
    }
    // F_i: negated matrix coefficients, then the inequality rows, with
    // repeated terms consolidated.
    let mut per_var: BTreeMap<usize, Vec<(usize, DMatrix<f64>)>> = BTreeMap::new();
    for (bi, block) in prob.psd_blocks.iter().enumerate() {
        let mut summed: BTreeMap<usize, DMatrix<f64>> = BTreeMap::new();
        for term in &block.terms {
            let slot = summed
                .entry(term.var)
                .or_insert_with(|| DMatrix::zeros(block.dim, block.dim));
            *slot -= &term.coeff;
        }
        for (var, coeff) in summed {
            per_var.entry(var).or_default().push((bi, coeff));
        }
    }
    let mut lp_per_var: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for (row, ineq) in prob.lin_ineqs.iter().enumerate() {
        let mut summed: BTreeMap<usize, f64> = BTreeMap::new();
        for &(var, coeff) in &ineq.terms {
            *summed.entry(var).or_insert(0.0) += coeff;
        }
        for (var, coeff) in summed {
            if coeff != 0.0 {
                lp_per_var.entry(var).or_default().push((row, coeff));
            }
        }
    }
    for var in 0..prob.num_vars {
        if let Some(blocks) = per_var.get(&var) {
            for (bi, coeff) in blocks {
                push_matrix_entries(&mut entries, var + 1, *bi, coeff);
            }
        }
        if let Some(rows) = lp_per_var.get(&var) {
            for &(row, coeff) in rows {
                entries.push(SdpaEntry {
                    mat: var + 1,
                    block: lp_block + 1,
                    i: row + 1,
                    j: row + 1,
                    value: coeff,
                });
            }
        }
    }

    Ok(SdpaProblem {
        num_vars: prob.num_vars,
        block_sizes,
        objective,
        entries,
    })
}

/// The feasibility program as a pure SDPA problem: exact boundary, no
/// objective.
pub fn to_sdpa(prob: &FeasibilityProblem) -> Result<SdpaProblem> {
    from_cone(&prob.to_cone(0.0, 0.0, &[]))
}

impl SdpaProblem {
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", self.num_vars)?;
        writeln!(out, "{}", self.block_sizes.len())?;
        let sizes: Vec<String> = self.block_sizes.iter().map(|s| s.to_string()).collect();
        writeln!(out, "{}", sizes.join(" "))?;
        let obj: Vec<String> = self.objective.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(out, "{}", obj.join(" "))?;
        for e in &self.entries {
            writeln!(out, "{} {} {} {} {:.16e}", e.mat, e.block, e.i, e.j, e.value)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("SDPA text is ASCII")
    }

    /// Reads the sparse format, tolerating `*`/`"` comment lines and the
    /// customary `,(){}` separators.
    pub fn parse(text: &str) -> Result<SdpaProblem> {
        let mut tokens = text
            .lines()
            .filter(|l| {
                let t = l.trim_start();
                !t.starts_with('*') && !t.starts_with('"')
            })
            .flat_map(|l| l.split(|c: char| c.is_whitespace() || ",(){}".contains(c)))
            .filter(|t| !t.is_empty());

        fn want<'a>(tokens: &mut impl Iterator<Item = &'a str>, what: &str) -> Result<&'a str> {
            tokens
                .next()
                .ok_or_else(|| Error::SdpaFormat(format!("file ends before {what}")))
        }
        fn usize_of(tok: &str, what: &str) -> Result<usize> {
            tok.parse()
                .map_err(|_| Error::SdpaFormat(format!("bad {what}: {tok:?}")))
        }
        fn f64_of(tok: &str, what: &str) -> Result<f64> {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::SdpaFormat(format!("bad {what}: {tok:?}")))?;
            if !v.is_finite() {
                return Err(Error::SdpaFormat(format!("non-finite {what}: {tok:?}")));
            }
            Ok(v)
        }

        let num_vars = usize_of(want(&mut tokens, "the variable count")?, "variable count")?;
        let nblocks = usize_of(want(&mut tokens, "the block count")?, "block count")?;
        let mut block_sizes = Vec::with_capacity(nblocks);
        for _ in 0..nblocks {
            let tok = want(&mut tokens, "a block size")?;
            let size: i64 = tok
                .parse()
                .map_err(|_| Error::SdpaFormat(format!("bad block size: {tok:?}")))?;
            if size == 0 {
                return Err(Error::SdpaFormat("zero block size".into()));
            }
            block_sizes.push(size);
        }
        let mut objective = Vec::with_capacity(num_vars);
        for _ in 0..num_vars {
            objective.push(f64_of(want(&mut tokens, "an objective value")?, "objective value")?);
        }
        let mut entries = Vec::new();
        while let Some(tok) = tokens.next() {
            let mat = usize_of(tok, "matrix index")?;
            let block = usize_of(want(&mut tokens, "a block index")?, "block index")?;
            let i = usize_of(want(&mut tokens, "a row index")?, "row index")?;
            let j = usize_of(want(&mut tokens, "a column index")?, "column index")?;
            let value = f64_of(want(&mut tokens, "an entry value")?, "entry value")?;
            if mat > num_vars {
                return Err(Error::SdpaFormat(format!(
                    "matrix index {mat} exceeds variable count {num_vars}"
                )));
            }
            if block == 0 || block > nblocks {
                return Err(Error::SdpaFormat(format!("block index {block} out of range")));
            }
            let extent = block_sizes[block - 1].unsigned_abs() as usize;
            if i == 0 || j == 0 || i > extent || j > extent {
                return Err(Error::SdpaFormat(format!(
                    "entry ({i}, {j}) outside block {block} of extent {extent}"
                )));
            }
            if block_sizes[block - 1] < 0 && i != j {
                return Err(Error::SdpaFormat(format!(
                    "off-diagonal entry ({i}, {j}) in diagonal block {block}"
                )));
            }
            let (i, j) = if i <= j { (i, j) } else { (j, i) };
            entries.push(SdpaEntry {
                mat,
                block,
                i,
                j,
                value,
            });
        }
        Ok(SdpaProblem {
            num_vars,
            block_sizes,
            objective,
            entries,
        })
    }
}

pub fn export_sdpa<P: AsRef<Path>>(prob: &FeasibilityProblem, path: P) -> Result<()> {
    let sdpa = to_sdpa(prob)?;
    let mut file = std::fs::File::create(path)?;
    sdpa.write(&mut file)?;
    Ok(())
}

pub fn import_sdpa<P: AsRef<Path>>(path: P) -> Result<SdpaProblem> {
    SdpaProblem::parse(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmi::LmiData;
    use crate::model::ternary_embed;
    use crate::sdp::backend::{LinIneq, MatrixTerm, PsdBlock};
    use crate::sdp::encode;

    /// One variable, the 1x1 inequality `x <= 0`, and the floor `x >= 1`.
    fn trivial_problem() -> ConeProblem {
        ConeProblem {
            num_vars: 1,
            psd_blocks: vec![PsdBlock {
                dim: 1,
                constant: DMatrix::zeros(1, 1),
                terms: vec![MatrixTerm {
                    var: 0,
                    coeff: DMatrix::from_element(1, 1, 1.0),
                }],
            }],
            lin_ineqs: vec![LinIneq {
                terms: vec![(0, 1.0)],
                lower: 1.0,
            }],
            quad_objective: 0.0,
            linear_objective: Vec::new(),
        }
    }

    const TRIVIAL_TEXT: &str = "1\n\
                                2\n\
                                1 -1\n\
                                0.0000000000000000e0\n\
                                0 2 1 1 1.0000000000000000e0\n\
                                1 1 1 1 -1.0000000000000000e0\n\
                                1 2 1 1 1.0000000000000000e0\n";

    #[test]
    fn trivial_problem_matches_the_frozen_text() {
        let sdpa = from_cone(&trivial_problem()).unwrap();
        assert_eq!(sdpa.to_text(), TRIVIAL_TEXT);
    }

    #[test]
    fn frozen_text_parses_back_to_the_same_problem() {
        let sdpa = from_cone(&trivial_problem()).unwrap();
        assert_eq!(SdpaProblem::parse(TRIVIAL_TEXT).unwrap(), sdpa);
    }

    #[test]
    fn example_encoding_round_trips_bit_for_bit() {
        let sys = ternary_embed(
            DMatrix::from_row_slice(2, 2, &[0.9464, 0.0957, -0.9568, 0.9033]),
            DMatrix::from_row_slice(2, 1, &[0.0049, 0.0959]),
            DMatrix::from_row_slice(1, 2, &[9.9, 0.495]),
        )
        .unwrap();
        let lmi = LmiData::build(&sys).unwrap();
        let prob = encode(&sys, &lmi, 1e-6).unwrap();
        let sdpa = to_sdpa(&prob).unwrap();
        let back = SdpaProblem::parse(&sdpa.to_text()).unwrap();
        assert_eq!(back, sdpa);
        assert!(sdpa.entries.len() > 1000, "encoding should be nontrivial");
    }

    #[test]
    fn parser_tolerates_comments_and_separators() {
        let text = "* hand-edited variant\n\
                    \" another comment line\n\
                    1\n\
                    2\n\
                    {1, -1}\n\
                    0.0000000000000000e0\n\
                    0 2 1 1 1.0000000000000000e0\n\
                    1 1 1 1 -1.0000000000000000e0\n\
                    1 2 1 1 1.0000000000000000e0\n";
        let sdpa = from_cone(&trivial_problem()).unwrap();
        assert_eq!(SdpaProblem::parse(text).unwrap(), sdpa);
    }

    #[test]
    fn parser_rejects_malformed_input() {
        for bad in [
            "",
            "1\n2\n1 -1\n0.0\n1 1 1",
            "1\n1\n1\n0.0\n1 2 1 1 1.0",
            "1\n1\n2\n0.0\n1 1 3 1 1.0",
            "1\n1\n-2\n0.0\n1 1 1 2 1.0",
            "1\n1\n0\n0.0\n",
            "1\n1\n1\nnope\n",
            "1\n1\n1\n1e999\n",
        ] {
            assert!(
                matches!(SdpaProblem::parse(bad), Err(Error::SdpaFormat(_))),
                "expected a format error for {bad:?}"
            );
        }
    }

    #[test]
    fn quadratic_objectives_are_refused() {
        let mut prob = trivial_problem();
        prob.quad_objective = 1.0;
        assert!(matches!(from_cone(&prob), Err(Error::SdpaFormat(_))));
    }

    #[test]
    fn awkward_values_survive_the_text_round_trip() {
        let mut prob = trivial_problem();
        let values = [
            0.1 + 0.2,
            std::f64::consts::PI,
            -1.0 / 3.0,
            6.02214076e23,
            5e-324_f64.max(1e-300),
        ];
        for (k, &v) in values.iter().enumerate() {
            prob.psd_blocks[0].terms.push(MatrixTerm {
                var: 0,
                coeff: DMatrix::from_element(1, 1, v * (k as f64 + 1.0)),
            });
        }
        let sdpa = from_cone(&prob).unwrap();
        let back = SdpaProblem::parse(&sdpa.to_text()).unwrap();
        for (a, b) in sdpa.entries.iter().zip(&back.entries) {
            assert_eq!(a.value.to_bits(), b.value.to_bits(), "value drifted in text");
        }
    }
}
