//! Systematic erasure coding over GF(2^16).
//!
//! Splits a byte string into `k` data shards and derives `n - k` parity
//! shards from a Cauchy matrix, so that any `k` distinct shards of the `n`
//! reconstruct the input. The first `k` shards are the input itself
//! (systematic), which keeps the no-loss path a plain concatenation.
//!
//! A 16-bit symbol field is used because CRL piece counts routinely exceed
//! the 255-shard ceiling of byte-field Reed-Solomon.

use std::sync::OnceLock;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ErasureError {
    #[error("need {needed} distinct shards, got {got}")]
    NotEnoughShards { needed: usize, got: usize },
    #[error("shard length {got} does not match configured {expected}")]
    ShardLength { expected: usize, got: usize },
    #[error("shard index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("invalid code parameters: {0}")]
    BadParameters(&'static str),
}

/// x^16 + x^12 + x^3 + x + 1, primitive over GF(2).
const POLY: u32 = 0x1100B;
const FIELD_ORDER: usize = 1 << 16;
const GROUP_ORDER: usize = FIELD_ORDER - 1;

struct Tables {
    exp: Vec<u16>, // doubled length so products skip the modulo
    log: Vec<u32>,
}

fn tables() -> &'static Tables {
    static TABLES: OnceLock<Tables> = OnceLock::new();
    TABLES.get_or_init(|| {
        let mut exp = vec![0u16; 2 * GROUP_ORDER];
        let mut log = vec![u32::MAX; FIELD_ORDER];
        let mut x: u32 = 1;
        for i in 0..GROUP_ORDER {
            exp[i] = x as u16;
            assert_eq!(log[x as usize], u32::MAX, "generator 2 is not primitive");
            log[x as usize] = i as u32;
            x <<= 1;
            if x & 0x10000 != 0 {
                x ^= POLY;
            }
        }
        assert_eq!(x, 1, "generator cycle did not close");
        for i in 0..GROUP_ORDER {
            exp[GROUP_ORDER + i] = exp[i];
        }
        Tables { exp, log }
    })
}

#[inline]
fn gf_mul(t: &Tables, a: u16, b: u16) -> u16 {
    if a == 0 || b == 0 {
        return 0;
    }
    t.exp[(t.log[a as usize] + t.log[b as usize]) as usize]
}

#[inline]
fn gf_inv(t: &Tables, a: u16) -> u16 {
    debug_assert_ne!(a, 0);
    t.exp[GROUP_ORDER - t.log[a as usize] as usize]
}

/// Cauchy coefficient tying parity row `r` to data column `j`:
/// `1 / ((k + r) ^ j)`. Distinct row and column labels guarantee a nonzero
/// denominator, and every square submatrix of the resulting Cauchy matrix is
/// invertible, which is exactly the any-`k`-of-`n` property.
#[inline]
fn cauchy(t: &Tables, k: usize, r: usize, j: usize) -> u16 {
    gf_inv(t, ((k + r) ^ j) as u16)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ErasureCode {
    k: usize,
    n: usize,
    shard_bytes: usize,
}

impl ErasureCode {
    pub fn new(k: usize, n: usize, shard_bytes: usize) -> Result<Self, ErasureError> {
        if k == 0 || n < k {
            return Err(ErasureError::BadParameters("need 0 < k <= n"));
        }
        if n > FIELD_ORDER {
            return Err(ErasureError::BadParameters("n exceeds field order"));
        }
        if shard_bytes == 0 || shard_bytes % 2 != 0 {
            return Err(ErasureError::BadParameters(
                "shard length must be positive and even",
            ));
        }
        Ok(Self { k, n, shard_bytes })
    }

    pub fn data_shards(&self) -> usize {
        self.k
    }

    pub fn total_shards(&self) -> usize {
        self.n
    }

    pub fn shard_bytes(&self) -> usize {
        self.shard_bytes
    }

    /// Split `data` into `k` zero-padded data shards followed by `n - k`
    /// parity shards. `data` must fit in `k * shard_bytes` bytes.
    pub fn encode(&self, data: &[u8]) -> Result<Vec<Vec<u8>>, ErasureError> {
        if data.len() > self.k * self.shard_bytes {
            return Err(ErasureError::BadParameters("data exceeds k shards"));
        }
        let t = tables();
        let mut shards = Vec::with_capacity(self.n);
        for j in 0..self.k {
            let mut shard = vec![0u8; self.shard_bytes];
            let lo = (j * self.shard_bytes).min(data.len());
            let hi = ((j + 1) * self.shard_bytes).min(data.len());
            shard[..hi - lo].copy_from_slice(&data[lo..hi]);
            shards.push(shard);
        }
        let symbols = self.shard_bytes / 2;
        for r in 0..self.n - self.k {
            let mut parity = vec![0u16; symbols];
            for j in 0..self.k {
                let c = cauchy(t, self.k, r, j);
                let data_shard = &shards[j];
                for (s, p) in parity.iter_mut().enumerate() {
                    let sym = u16::from_le_bytes([data_shard[2 * s], data_shard[2 * s + 1]]);
                    *p ^= gf_mul(t, c, sym);
                }
            }
            let mut bytes = vec![0u8; self.shard_bytes];
            for (s, p) in parity.iter().enumerate() {
                bytes[2 * s..2 * s + 2].copy_from_slice(&p.to_le_bytes());
            }
            shards.push(bytes);
        }
        Ok(shards)
    }

    /// Reconstruct the original `k * shard_bytes` data bytes from any `k`
    /// distinct shards. Duplicate indices are tolerated and ignored.
    pub fn decode(&self, shards: &[(usize, Vec<u8>)]) -> Result<Vec<u8>, ErasureError> {
        let t = tables();
        let symbols = self.shard_bytes / 2;
        let mut data: Vec<Option<Vec<u16>>> = vec![None; self.k];
        let mut parity: Vec<(usize, Vec<u16>)> = Vec::new();
        let mut seen = vec![false; self.n];
        let mut distinct = 0usize;
        for (idx, bytes) in shards {
            if *idx >= self.n {
                return Err(ErasureError::IndexOutOfRange(*idx));
            }
            if bytes.len() != self.shard_bytes {
                return Err(ErasureError::ShardLength {
                    expected: self.shard_bytes,
                    got: bytes.len(),
                });
            }
            if seen[*idx] {
                continue;
            }
            seen[*idx] = true;
            distinct += 1;
            let syms: Vec<u16> = (0..symbols)
                .map(|s| u16::from_le_bytes([bytes[2 * s], bytes[2 * s + 1]]))
                .collect();
            if *idx < self.k {
                data[*idx] = Some(syms);
            } else {
                parity.push((*idx - self.k, syms));
            }
        }
        if distinct < self.k {
            return Err(ErasureError::NotEnoughShards {
                needed: self.k,
                got: distinct,
            });
        }

        let missing: Vec<usize> = (0..self.k).filter(|j| data[*j].is_none()).collect();
        let m = missing.len();
        if m > 0 {
            // Subtract the received data columns from m parity rows, leaving
            // an m-by-m Cauchy system in the missing columns.
            let rows = &parity[..m];
            let mut rhs: Vec<Vec<u16>> = Vec::with_capacity(m);
            for (r, psyms) in rows {
                let mut acc = psyms.clone();
                for (j, shard) in data.iter().enumerate() {
                    if let Some(syms) = shard {
                        let c = cauchy(t, self.k, *r, j);
                        for (s, a) in acc.iter_mut().enumerate() {
                            *a ^= gf_mul(t, c, syms[s]);
                        }
                    }
                }
                rhs.push(acc);
            }
            let mut mat: Vec<Vec<u16>> = rows
                .iter()
                .map(|(r, _)| missing.iter().map(|j| cauchy(t, self.k, *r, *j)).collect())
                .collect();

            // Gauss-Jordan over GF(2^16); the Cauchy submatrix is always
            // invertible, so a zero pivot means corrupted inputs.
            for col in 0..m {
                let pivot = (col..m)
                    .find(|row| mat[*row][col] != 0)
                    .ok_or(ErasureError::BadParameters("singular decode matrix"))?;
                mat.swap(col, pivot);
                rhs.swap(col, pivot);
                let inv = gf_inv(t, mat[col][col]);
                for x in mat[col].iter_mut() {
                    *x = gf_mul(t, *x, inv);
                }
                for x in rhs[col].iter_mut() {
                    *x = gf_mul(t, *x, inv);
                }
                for row in 0..m {
                    if row == col || mat[row][col] == 0 {
                        continue;
                    }
                    let factor = mat[row][col];
                    for c2 in 0..m {
                        let v = gf_mul(t, factor, mat[col][c2]);
                        mat[row][c2] ^= v;
                    }
                    for s in 0..symbols {
                        let v = gf_mul(t, factor, rhs[col][s]);
                        rhs[row][s] ^= v;
                    }
                }
            }
            for (slot, syms) in missing.into_iter().zip(rhs.into_iter()) {
                data[slot] = Some(syms);
            }
        }

        let mut out = Vec::with_capacity(self.k * self.shard_bytes);
        for shard in data {
            for sym in shard.expect("all data shards recovered") {
                out.extend_from_slice(&sym.to_le_bytes());
            }
        }
        Ok(out)
    }
}
