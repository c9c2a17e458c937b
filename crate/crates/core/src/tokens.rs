//! Multi-codebook token grids, the delay pattern and codebook-summed
//! embeddings.
//!
//! A [`TokenGrid`] holds `T` frames of `K` parallel codebook tokens in
//! `[0, N)`. The delay pattern shifts codebook `k` right by `k` frames so
//! all codebooks of one row can be predicted in a single autoregressive
//! step; the vacated cells hold the reserved id `N` (PAD) and the last `k`
//! tokens of codebook `k` fall off the end, keeping the length at `T`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TokenError {
    #[error("grid shape: {0}")]
    Shape(String),
    #[error("token {token} at ({t}, {k}) outside codebook of size {n}")]
    TokenOutOfRange { t: usize, k: usize, token: u32, n: u32 },
    #[error("PAD placement violates the delay pattern at ({t}, {k})")]
    InconsistentPad { t: usize, k: usize },
    #[error("embedding tables are {tables_k}x{tables_rows} rows but grid has K={k}, N={n}")]
    TableMismatch {
        tables_k: usize,
        tables_rows: usize,
        k: usize,
        n: u32,
    },
    #[error("bad grid record: {0}")]
    Json(String),
}

/// `T x K` codec tokens, row-major by frame.
///
/// Grids recovered from the delay pattern carry PAD in the tail cells
/// `t >= T - k` that the delay dropped; [`TokenGrid::padded_tail`] flags them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    frames: usize,
    codebooks: usize,
    codebook_size: u32,
    tokens: Vec<u32>,
    padded_tail: bool,
}

fn check_shape(frames: usize, codebooks: usize, len: usize) -> Result<(), TokenError> {
    if codebooks == 0 {
        return Err(TokenError::Shape("K must be at least 1".into()));
    }
    if frames * codebooks != len {
        return Err(TokenError::Shape(format!(
            "{len} tokens for T={frames}, K={codebooks}"
        )));
    }
    Ok(())
}

impl TokenGrid {
    pub fn new(
        frames: usize,
        codebooks: usize,
        codebook_size: u32,
        tokens: Vec<u32>,
    ) -> Result<Self, TokenError> {
        check_shape(frames, codebooks, tokens.len())?;
        for (i, &token) in tokens.iter().enumerate() {
            if token >= codebook_size {
                return Err(TokenError::TokenOutOfRange {
                    t: i / codebooks,
                    k: i % codebooks,
                    token,
                    n: codebook_size,
                });
            }
        }
        Ok(TokenGrid {
            frames,
            codebooks,
            codebook_size,
            tokens,
            padded_tail: false,
        })
    }

    pub fn from_fn(
        frames: usize,
        codebooks: usize,
        codebook_size: u32,
        mut f: impl FnMut(usize, usize) -> u32,
    ) -> Result<Self, TokenError> {
        let tokens = (0..frames)
            .flat_map(|t| (0..codebooks).map(move |k| (t, k)))
            .map(|(t, k)| f(t, k))
            .collect();
        TokenGrid::new(frames, codebooks, codebook_size, tokens)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn codebooks(&self) -> usize {
        self.codebooks
    }

    pub fn codebook_size(&self) -> u32 {
        self.codebook_size
    }

    pub fn pad_id(&self) -> u32 {
        self.codebook_size
    }

    pub fn get(&self, t: usize, k: usize) -> u32 {
        self.tokens[t * self.codebooks + k]
    }

    pub fn row(&self, t: usize) -> &[u32] {
        &self.tokens[t * self.codebooks..(t + 1) * self.codebooks]
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Whether the delay-dropped tail cells hold PAD.
    pub fn padded_tail(&self) -> bool {
        self.padded_tail
    }

    /// Cells that survive a delay round trip: `t < T - k`.
    pub fn is_recoverable(&self, t: usize, k: usize) -> bool {
        t + k < self.frames
    }

    pub fn codebook(&self, k: usize) -> impl Iterator<Item = u32> + '_ {
        (0..self.frames).map(move |t| self.get(t, k))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&GridRecord::from(self)).expect("grid serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, TokenError> {
        let rec: GridRecord =
            serde_json::from_str(text).map_err(|e| TokenError::Json(e.to_string()))?;
        rec.try_into()
    }
}

/// JSON-lines form `{"T":..,"K":..,"N":..,"tokens":[[..], ..]}`, one inner
/// array per frame.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridRecord {
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "K")]
    pub codebooks: usize,
    #[serde(rename = "N")]
    pub codebook_size: u32,
    pub tokens: Vec<Vec<u32>>,
}

impl From<&TokenGrid> for GridRecord {
    fn from(g: &TokenGrid) -> Self {
        GridRecord {
            frames: g.frames,
            codebooks: g.codebooks,
            codebook_size: g.codebook_size,
            tokens: (0..g.frames).map(|t| g.row(t).to_vec()).collect(),
        }
    }
}

impl TryFrom<GridRecord> for TokenGrid {
    type Error = TokenError;

    /// PAD is accepted only in the delay-dropped tail.
    fn try_from(rec: GridRecord) -> Result<Self, TokenError> {
        if rec.tokens.len() != rec.frames || rec.tokens.iter().any(|r| r.len() != rec.codebooks) {
            return Err(TokenError::Shape(format!(
                "record rows do not match T={}, K={}",
                rec.frames, rec.codebooks
            )));
        }
        let n = rec.codebook_size;
        let mut padded_tail = false;
        for (t, row) in rec.tokens.iter().enumerate() {
            for (k, &token) in row.iter().enumerate() {
                if token == n && t + k >= rec.frames {
                    padded_tail = true;
                } else if token >= n {
                    return Err(TokenError::TokenOutOfRange { t, k, token, n });
                }
            }
        }
        let tokens: Vec<u32> = rec.tokens.into_iter().flatten().collect();
        check_shape(rec.frames, rec.codebooks, tokens.len())?;
        Ok(TokenGrid {
            frames: rec.frames,
            codebooks: rec.codebooks,
            codebook_size: n,
            tokens,
            padded_tail,
        })
    }
}

/// A grid in delay-pattern layout: cell `(t, k)` is PAD iff `t < k`, and
/// otherwise holds source cell `(t - k, k)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DelayedGrid {
    frames: usize,
    codebooks: usize,
    codebook_size: u32,
    tokens: Vec<u32>,
}

impl DelayedGrid {
    /// Validates PAD placement and token range.
    pub fn new(
        frames: usize,
        codebooks: usize,
        codebook_size: u32,
        tokens: Vec<u32>,
    ) -> Result<Self, TokenError> {
        check_shape(frames, codebooks, tokens.len())?;
        for t in 0..frames {
            for k in 0..codebooks {
                let token = tokens[t * codebooks + k];
                if (token == codebook_size) != (t < k) {
                    return Err(TokenError::InconsistentPad { t, k });
                }
                if token > codebook_size {
                    return Err(TokenError::TokenOutOfRange {
                        t,
                        k,
                        token,
                        n: codebook_size,
                    });
                }
            }
        }
        Ok(DelayedGrid {
            frames,
            codebooks,
            codebook_size,
            tokens,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn codebooks(&self) -> usize {
        self.codebooks
    }

    pub fn codebook_size(&self) -> u32 {
        self.codebook_size
    }

    pub fn pad_id(&self) -> u32 {
        self.codebook_size
    }

    pub fn get(&self, t: usize, k: usize) -> u32 {
        self.tokens[t * self.codebooks + k]
    }

    pub fn row(&self, t: usize) -> &[u32] {
        &self.tokens[t * self.codebooks..(t + 1) * self.codebooks]
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn is_pad(&self, t: usize, k: usize) -> bool {
        t < k
    }
}

pub fn apply_delay_pattern(grid: &TokenGrid) -> DelayedGrid {
    let (frames, codebooks) = (grid.frames, grid.codebooks);
    let pad = grid.pad_id();
    let mut tokens = vec![pad; frames * codebooks];
    for t in 0..frames {
        for k in 0..codebooks.min(t + 1) {
            tokens[t * codebooks + k] = grid.get(t - k, k);
        }
    }
    DelayedGrid {
        frames,
        codebooks,
        codebook_size: grid.codebook_size,
        tokens,
    }
}

/// Undoes the delay. Cells with `t >= T - k` cannot be recovered and hold
/// PAD; the returned grid reports them through `padded_tail`.
pub fn invert_delay_pattern(grid: &DelayedGrid) -> Result<TokenGrid, TokenError> {
    let (frames, codebooks) = (grid.frames, grid.codebooks);
    let pad = grid.pad_id();
    let mut tokens = vec![pad; frames * codebooks];
    let mut padded_tail = false;
    for t in 0..frames {
        for k in 0..codebooks {
            let token = grid.get(t, k);
            if (token == pad) != (t < k) {
                return Err(TokenError::InconsistentPad { t, k });
            }
            if t + k < frames {
                tokens[t * codebooks + k] = grid.get(t + k, k);
            } else {
                padded_tail = true;
            }
        }
    }
    Ok(TokenGrid {
        frames,
        codebooks,
        codebook_size: grid.codebook_size,
        tokens,
        padded_tail,
    })
}

/// Per-codebook lookup tables of `N + 1` rows (row `N` is PAD) and width `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTables {
    codebook_size: u32,
    dim: usize,
    tables: Vec<Vec<f32>>,
}

impl EmbeddingTables {
    pub fn new(codebook_size: u32, dim: usize, tables: Vec<Vec<f32>>) -> Result<Self, TokenError> {
        let rows = codebook_size as usize + 1;
        if tables.is_empty() || tables.iter().any(|t| t.len() != rows * dim) {
            return Err(TokenError::Shape(format!(
                "each table must hold {rows}x{dim} values"
            )));
        }
        if tables.iter().flatten().any(|v| !v.is_finite()) {
            return Err(TokenError::Shape("non-finite table entry".into()));
        }
        Ok(EmbeddingTables {
            codebook_size,
            dim,
            tables,
        })
    }

    pub fn codebooks(&self) -> usize {
        self.tables.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, k: usize, token: u32) -> &[f32] {
        let start = token as usize * self.dim;
        &self.tables[k][start..start + self.dim]
    }

    pub fn table_mut(&mut self, k: usize) -> &mut [f32] {
        &mut self.tables[k]
    }

    /// Sum of one row of `K` tokens (PAD allowed).
    pub fn embed_row(&self, row: &[u32]) -> Result<Vec<f32>, TokenError> {
        if row.len() != self.codebooks() {
            return Err(TokenError::Shape(format!(
                "row has {} tokens for {} tables",
                row.len(),
                self.codebooks()
            )));
        }
        let mut acc = vec![0.0f32; self.dim];
        for (k, &token) in row.iter().enumerate() {
            if token > self.codebook_size {
                return Err(TokenError::TokenOutOfRange {
                    t: 0,
                    k,
                    token,
                    n: self.codebook_size,
                });
            }
            for (a, &v) in acc.iter_mut().zip(self.row(k, token)) {
                *a += v;
            }
        }
        Ok(acc)
    }
}

/// Row `t` of the result is `sum_k tables[k][grid[t][k]]`.
pub fn embed_grid(grid: &DelayedGrid, tables: &EmbeddingTables) -> Result<Vec<Vec<f32>>, TokenError> {
    if tables.codebooks() != grid.codebooks || tables.codebook_size != grid.codebook_size {
        return Err(TokenError::TableMismatch {
            tables_k: tables.codebooks(),
            tables_rows: tables.codebook_size as usize + 1,
            k: grid.codebooks,
            n: grid.codebook_size,
        });
    }
    (0..grid.frames)
        .map(|t| {
            tables.embed_row(grid.row(t)).map_err(|e| match e {
                TokenError::TokenOutOfRange { k, token, n, .. } => {
                    TokenError::TokenOutOfRange { t, k, token, n }
                }
                e => e,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, frames: usize, codebooks: usize, n: u32) -> TokenGrid {
        TokenGrid::from_fn(frames, codebooks, n, |_, _| rng.random_range(0..n)).unwrap()
    }

    #[test]
    fn single_codebook_has_no_delay() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_grid(&mut rng, 10, 1, 7);
        let d = apply_delay_pattern(&g);
        assert_eq!(d.tokens(), g.tokens());
        assert!(d.tokens().iter().all(|&x| x != 7));
        let back = invert_delay_pattern(&d).unwrap();
        assert_eq!(back, g);
        assert!(!back.padded_tail());
    }

    #[test]
    fn diagonal_example() {
        let g = TokenGrid::from_fn(4, 4, 100, |t, k| (10 * t + k) as u32).unwrap();
        let d = apply_delay_pattern(&g);
        const P: u32 = 100;
        assert_eq!(d.row(0), &[0, P, P, P]);
        assert_eq!(d.row(1), &[10, 1, P, P]);
        assert_eq!(d.row(2), &[20, 11, 2, P]);
        assert_eq!(d.row(3), &[30, 21, 12, 3]);

        let back = invert_delay_pattern(&d).unwrap();
        assert!(back.padded_tail());
        for t in 0..4 {
            for k in 0..4 {
                if t + k < 4 {
                    assert_eq!(back.get(t, k), g.get(t, k));
                } else {
                    assert_eq!(back.get(t, k), P);
                }
            }
        }
    }

    #[test]
    fn random_roundtrip_on_recoverable_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let frames = rng.random_range(8..=256);
            let codebooks = [1, 2, 4][rng.random_range(0..3)];
            let g = random_grid(&mut rng, frames, codebooks, 64);
            let back = invert_delay_pattern(&apply_delay_pattern(&g)).unwrap();
            for t in 0..frames {
                for k in 0..codebooks {
                    if g.is_recoverable(t, k) {
                        assert_eq!(back.get(t, k), g.get(t, k));
                    }
                }
            }
        }
    }

    #[test]
    fn inconsistent_pad_detected() {
        // PAD below the diagonal
        let r = DelayedGrid::new(2, 2, 5, vec![0, 5, 5, 1]);
        assert!(matches!(r, Err(TokenError::InconsistentPad { t: 1, k: 0 })));
        // missing PAD above the diagonal
        assert!(DelayedGrid::new(2, 2, 5, vec![0, 1, 2, 3]).is_err());
    }

    #[test]
    fn embedding_examples() {
        let tables = EmbeddingTables::new(3, 2, vec![vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.0, 0.0]]).unwrap();
        let g = apply_delay_pattern(&TokenGrid::new(2, 1, 3, vec![2, 0]).unwrap());
        assert_eq!(embed_grid(&g, &tables).unwrap(), vec![vec![5.0, 6.0], vec![1.0, 2.0]]);

        // an all-PAD row with zero PAD rows embeds to zero
        let tables = EmbeddingTables::new(3, 2, vec![vec![1.0; 6].into_iter().chain([0.0, 0.0]).collect(); 3]).unwrap();
        let g = apply_delay_pattern(&TokenGrid::new(3, 3, 3, vec![0; 9]).unwrap());
        let e = embed_grid(&g, &tables).unwrap();
        assert_eq!(e[0], vec![1.0, 1.0]);
        assert_eq!(e[2], vec![3.0, 3.0]);
        assert_eq!(tables.embed_row(&[3, 3, 3]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn embedding_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, d, k) = (16u32, 5usize, 4usize);
        let raw: Vec<Vec<f32>> = (0..k)
            .map(|_| (0..(n as usize + 1) * d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let tables = EmbeddingTables::new(n, d, raw.clone()).unwrap();
        let g = apply_delay_pattern(&random_grid(&mut rng, 40, k, n));
        let e = embed_grid(&g, &tables).unwrap();
        for t in 0..40 {
            for j in 0..d {
                let mut s = 0.0f32;
                for (kk, table) in raw.iter().enumerate() {
                    s += table[g.get(t, kk) as usize * d + j];
                }
                assert_eq!(e[t][j], s);
            }
        }
    }

    #[test]
    fn json_record_roundtrip() {
        let g = TokenGrid::from_fn(5, 2, 9, |t, k| (t + k) as u32 % 9).unwrap();
        let text = g.to_json();
        assert!(text.starts_with("{\"T\":5,\"K\":2,\"N\":9,\"tokens\":[[0,1],"));
        assert_eq!(TokenGrid::from_json(&text).unwrap(), g);

        let recovered = invert_delay_pattern(&apply_delay_pattern(&g)).unwrap();
        assert_eq!(TokenGrid::from_json(&recovered.to_json()).unwrap(), recovered);
        assert!(TokenGrid::from_json(r#"{"T":1,"K":2,"N":9,"tokens":[[9,0]]}"#).is_err());
    }

    proptest! {
        #[test]
        fn embedding_is_linear_per_table(seed in 0u64..500, alpha in -3.0f32..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, d, k) = (8u32, 3usize, 2usize);
            let raw: Vec<Vec<f32>> = (0..k)
                .map(|_| (0..(n as usize + 1) * d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let g = apply_delay_pattern(&random_grid(&mut rng, 12, k, n));
            let base = EmbeddingTables::new(n, d, raw.clone()).unwrap();
            let only0 = EmbeddingTables::new(n, d, vec![raw[0].clone(), vec![0.0; raw[1].len()]]).unwrap();
            let scaled = EmbeddingTables::new(n, d, vec![raw[0].iter().map(|v| v * alpha).collect(), raw[1].clone()]).unwrap();
            let (e, e0, es) = (embed_grid(&g, &base).unwrap(), embed_grid(&g, &only0).unwrap(), embed_grid(&g, &scaled).unwrap());
            for t in 0..12 {
                for j in 0..d {
                    let expect = e[t][j] + (alpha - 1.0) * e0[t][j];
                    prop_assert!((es[t][j] - expect).abs() < 1e-4);
                }
            }
        }
    }
}
