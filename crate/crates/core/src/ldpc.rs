//! Binary LDPC codes: construction, systematic encoding, flooding
//! sum-product decoding and alist import/export.
//!
//! The default code has `n = 104`, `k = 83` (rate 0.798). Its parity-check
//! matrix is built deterministically by progressive edge growth with column
//! weight 3, after which columns are reordered so that the `k` information
//! bits come first and the last `n - k` columns are the elimination pivots.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Result of decoding one codeword.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    /// Hard decisions on the information bits.
    pub info: Vec<u8>,
    /// Hard decisions on every code bit.
    pub codeword: Vec<u8>,
    /// `true` iff the hard decisions satisfied every check.
    pub converged: bool,
    pub iterations: usize,
}

/// A binary LDPC code given by its sparse parity-check matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LdpcCode {
    n: usize,
    /// Column indices of each check.
    checks: Vec<Vec<usize>>,
    /// Code positions carrying information bits, ascending.
    info_positions: Vec<usize>,
    /// `(pivot position, info indices)`: `bit[pivot] = xor of info[idx]`.
    parity_eqs: Vec<(usize, Vec<usize>)>,
    // decoder graph
    edge_var: Vec<usize>,
    check_edges: Vec<std::ops::Range<usize>>,
    var_edges: Vec<Vec<usize>>,
}

const LLR_CLAMP: f64 = 40.0;

impl LdpcCode {
    /// Builds a code from check rows. Rows may be redundant; `k` is
    /// `n - rank(H)`.
    pub fn from_checks(n: usize, checks: Vec<Vec<usize>>) -> Result<Self> {
        if n == 0 || checks.is_empty() {
            return Err(Error::invalid("empty parity-check matrix"));
        }
        for (r, row) in checks.iter().enumerate() {
            if row.iter().any(|&c| c >= n) {
                return Err(Error::invalid(format!("check {r} references a column >= {n}")));
            }
            let uniq: HashSet<_> = row.iter().collect();
            if uniq.len() != row.len() {
                return Err(Error::invalid(format!("check {r} repeats a column")));
            }
        }
        let (info_positions, parity_eqs) = systematic_form(n, &checks);

        let mut edge_var = Vec::new();
        let mut check_edges = Vec::with_capacity(checks.len());
        let mut var_edges = vec![Vec::new(); n];
        for row in &checks {
            let start = edge_var.len();
            for &v in row {
                var_edges[v].push(edge_var.len());
                edge_var.push(v);
            }
            check_edges.push(start..edge_var.len());
        }
        Ok(LdpcCode {
            n,
            checks,
            info_positions,
            parity_eqs,
            edge_var,
            check_edges,
            var_edges,
        })
    }

    /// The default `(104, 83)` code.
    pub fn reference() -> Self {
        let (n, m) = (104, 21);
        let checks = peg_checks(n, m, 3, 0x5eed_1d9c);
        // put pivot columns last so information bits are the first k positions
        let (info, eqs) = systematic_form(n, &checks);
        let mut order: Vec<usize> = info.clone();
        order.extend(eqs.iter().map(|(p, _)| *p));
        let mut new_pos = vec![0; n];
        for (new, &old) in order.iter().enumerate() {
            new_pos[old] = new;
        }
        let permuted = checks
            .iter()
            .map(|row| {
                let mut r: Vec<usize> = row.iter().map(|&c| new_pos[c]).collect();
                r.sort_unstable();
                r
            })
            .collect();
        Self::from_checks(n, permuted).expect("reference code is well formed")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.info_positions.len()
    }

    pub fn m(&self) -> usize {
        self.checks.len()
    }

    pub fn rate(&self) -> f64 {
        self.k() as f64 / self.n as f64
    }

    pub fn checks(&self) -> &[Vec<usize>] {
        &self.checks
    }

    pub fn info_positions(&self) -> &[usize] {
        &self.info_positions
    }

    /// Systematic encoding; information bits land on
    /// [`Self::info_positions`].
    pub fn encode(&self, info: &[u8]) -> Result<Vec<u8>> {
        if info.len() != self.k() {
            return Err(Error::invalid(format!(
                "expected {} information bits, got {}",
                self.k(),
                info.len()
            )));
        }
        let mut cw = vec![0u8; self.n];
        for (&p, &b) in self.info_positions.iter().zip(info) {
            cw[p] = b & 1;
        }
        for (pivot, idx) in &self.parity_eqs {
            cw[*pivot] = idx.iter().fold(0u8, |a, &i| a ^ (info[i] & 1));
        }
        Ok(cw)
    }

    /// `true` iff every parity check is satisfied.
    pub fn syndrome_ok(&self, bits: &[u8]) -> bool {
        self.checks
            .iter()
            .all(|row| row.iter().fold(0u8, |a, &c| a ^ (bits[c] & 1)) == 0)
    }

    pub fn extract_info(&self, codeword: &[u8]) -> Vec<u8> {
        self.info_positions.iter().map(|&p| codeword[p]).collect()
    }

    /// Flooding sum-product decoding with tanh-rule check updates. LLRs are
    /// `log P(0)/P(1)`; a zero LLR decides bit 0.
    pub fn decode(&self, llrs: &[f64], max_iters: usize) -> DecodeOutput {
        assert_eq!(llrs.len(), self.n, "LLR vector length");
        let ch: Vec<f64> = llrs.iter().map(|l| l.clamp(-LLR_CLAMP, LLR_CLAMP)).collect();
        let mut v2c: Vec<f64> = self.edge_var.iter().map(|&v| ch[v]).collect();
        let mut c2v = vec![0.0; self.edge_var.len()];
        let mut total = ch.clone();
        let mut hard: Vec<u8> = total.iter().map(|&t| u8::from(t < 0.0)).collect();
        let mut tanhs = Vec::new();
        let mut suffix = Vec::new();
        let mut iterations = 0;
        let mut converged = false;
        for it in 1..=max_iters {
            iterations = it;
            for range in &self.check_edges {
                tanhs.clear();
                tanhs.extend(v2c[range.clone()].iter().map(|m| (0.5 * m).tanh()));
                let d = tanhs.len();
                suffix.clear();
                suffix.resize(d + 1, 1.0);
                for j in (0..d).rev() {
                    suffix[j] = suffix[j + 1] * tanhs[j];
                }
                let mut prefix = 1.0;
                for j in 0..d {
                    let p = (prefix * suffix[j + 1]).clamp(-0.999_999_999_999, 0.999_999_999_999);
                    c2v[range.start + j] = 2.0 * p.atanh();
                    prefix *= tanhs[j];
                }
            }
            for v in 0..self.n {
                let t = ch[v] + self.var_edges[v].iter().map(|&e| c2v[e]).sum::<f64>();
                total[v] = t;
                hard[v] = u8::from(t < 0.0);
                for &e in &self.var_edges[v] {
                    v2c[e] = (t - c2v[e]).clamp(-LLR_CLAMP, LLR_CLAMP);
                }
            }
            if self.syndrome_ok(&hard) {
                converged = true;
                break;
            }
        }
        if max_iters == 0 {
            converged = self.syndrome_ok(&hard);
        }
        DecodeOutput {
            info: self.extract_info(&hard),
            codeword: hard,
            converged,
            iterations,
        }
    }

    /// Writes the parity-check matrix in alist format.
    pub fn to_alist(&self) -> String {
        let m = self.m();
        let mut cols = vec![Vec::new(); self.n];
        for (r, row) in self.checks.iter().enumerate() {
            for &c in row {
                cols[c].push(r);
            }
        }
        let max_c = cols.iter().map(Vec::len).max().unwrap_or(0);
        let max_r = self.checks.iter().map(Vec::len).max().unwrap_or(0);
        let mut s = String::new();
        let _ = writeln!(s, "{} {}", self.n, m);
        let _ = writeln!(s, "{max_c} {max_r}");
        let join = |v: Vec<String>| v.join(" ");
        let _ = writeln!(s, "{}", join(cols.iter().map(|c| c.len().to_string()).collect()));
        let _ = writeln!(s, "{}", join(self.checks.iter().map(|c| c.len().to_string()).collect()));
        for c in &cols {
            let mut v: Vec<String> = c.iter().map(|r| (r + 1).to_string()).collect();
            v.resize(max_c, "0".into());
            let _ = writeln!(s, "{}", join(v));
        }
        for row in &self.checks {
            let mut v: Vec<String> = row.iter().map(|c| (c + 1).to_string()).collect();
            v.resize(max_r, "0".into());
            let _ = writeln!(s, "{}", join(v));
        }
        s
    }

    /// Parses an alist description. Only the row lists are used to build the
    /// code; the column lists are checked for consistency.
    pub fn from_alist(text: &str) -> Result<Self> {
        let perr = |m: &str| Error::Parse {
            what: "alist".into(),
            message: m.into(),
        };
        let mut nums = text.split_whitespace().map(|t| {
            t.parse::<usize>()
                .map_err(|_| perr(&format!("not an integer: {t}")))
        });
        let mut next = || nums.next().unwrap_or_else(|| Err(perr("unexpected end of input")));
        let n = next()?;
        let m = next()?;
        let max_c = next()?;
        let max_r = next()?;
        let col_w: Vec<usize> = (0..n).map(|_| next()).collect::<Result<_>>()?;
        let row_w: Vec<usize> = (0..m).map(|_| next()).collect::<Result<_>>()?;
        let mut col_entries = HashSet::new();
        for (c, &w) in col_w.iter().enumerate() {
            for j in 0..max_c {
                let r = next()?;
                if j < w {
                    if r == 0 || r > m {
                        return Err(perr(&format!("column {c}: bad row index {r}")));
                    }
                    col_entries.insert((r - 1, c));
                }
            }
        }
        let mut checks = Vec::with_capacity(m);
        for (r, &w) in row_w.iter().enumerate() {
            let mut row = Vec::with_capacity(w);
            for j in 0..max_r {
                let c = next()?;
                if j < w {
                    if c == 0 || c > n {
                        return Err(perr(&format!("row {r}: bad column index {c}")));
                    }
                    if !col_entries.contains(&(r, c - 1)) {
                        return Err(perr(&format!("row {r} and column {} lists disagree", c - 1)));
                    }
                    row.push(c - 1);
                }
            }
            checks.push(row);
        }
        if checks.iter().map(Vec::len).sum::<usize>() != col_entries.len() {
            return Err(perr("row and column lists disagree"));
        }
        Self::from_checks(n, checks)
    }

    pub fn load_alist(path: &Path) -> Result<Self> {
        Self::from_alist(&std::fs::read_to_string(path)?)
    }

    pub fn save_alist(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_alist())?;
        Ok(())
    }
}

/// Gauss-Jordan elimination over GF(2), scanning pivot columns from the end.
/// Returns the non-pivot (information) positions and one equation per pivot.
fn systematic_form(n: usize, checks: &[Vec<usize>]) -> (Vec<usize>, Vec<(usize, Vec<usize>)>) {
    let words = n.div_ceil(64);
    let mut rows: Vec<Vec<u64>> = checks
        .iter()
        .map(|row| {
            let mut b = vec![0u64; words];
            for &c in row {
                b[c / 64] ^= 1 << (c % 64);
            }
            b
        })
        .collect();
    let bit = |r: &Vec<u64>, c: usize| (r[c / 64] >> (c % 64)) & 1 == 1;
    let mut pivots: Vec<(usize, usize)> = Vec::new(); // (row, col)
    let mut next_row = 0;
    for col in (0..n).rev() {
        if next_row == rows.len() {
            break;
        }
        let Some(p) = (next_row..rows.len()).find(|&r| bit(&rows[r], col)) else {
            continue;
        };
        rows.swap(next_row, p);
        let pivot_row = rows[next_row].clone();
        for (r, row) in rows.iter_mut().enumerate() {
            if r != next_row && bit(row, col) {
                for (a, b) in row.iter_mut().zip(&pivot_row) {
                    *a ^= b;
                }
            }
        }
        pivots.push((next_row, col));
        next_row += 1;
    }
    let pivot_cols: HashSet<usize> = pivots.iter().map(|&(_, c)| c).collect();
    let info: Vec<usize> = (0..n).filter(|c| !pivot_cols.contains(c)).collect();
    let mut eqs: Vec<(usize, Vec<usize>)> = pivots
        .iter()
        .map(|&(r, c)| {
            let idx = info
                .iter()
                .enumerate()
                .filter(|(_, &ic)| bit(&rows[r], ic))
                .map(|(i, _)| i)
                .collect();
            (c, idx)
        })
        .collect();
    eqs.sort_by_key(|e| e.0);
    (info, eqs)
}

/// Progressive-edge-growth style construction: every column gets `w` checks,
/// preferring checks of low degree that do not close a 4-cycle. Ties are
/// broken by a fixed-seed shuffle, so the result is deterministic.
fn peg_checks(n: usize, m: usize, w: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut used_pairs: HashSet<(usize, usize)> = HashSet::new();
    for col in 0..n {
        let mut chosen: Vec<usize> = Vec::with_capacity(w);
        for _ in 0..w {
            let mut cand: Vec<usize> = (0..m).filter(|r| !chosen.contains(r)).collect();
            cand.shuffle(&mut rng);
            let cost = |r: usize| {
                let cycles = chosen
                    .iter()
                    .filter(|&&c| used_pairs.contains(&(c.min(r), c.max(r))))
                    .count();
                (cycles, checks[r].len())
            };
            let best = *cand.iter().min_by_key(|&&r| cost(r)).expect("m > w");
            chosen.push(best);
        }
        for (a, &ra) in chosen.iter().enumerate() {
            for &rb in &chosen[a + 1..] {
                used_pairs.insert((ra.min(rb), ra.max(rb)));
            }
            checks[ra].push(col);
        }
    }
    for row in &mut checks {
        row.sort_unstable();
    }
    checks
}
