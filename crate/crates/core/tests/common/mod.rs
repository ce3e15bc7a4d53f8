//! Reference implementations shared by the integration tests.
//!
//! Nothing here calls into the library's field or codec code. Arithmetic is
//! shift-and-add multiplication and plain Gauss-Jordan elimination, slow but
//! easy to check by hand.

#![allow(dead_code)]

use rdrive::engine::{EngineConfig, EngineSetup, StorageEngine};
use rdrive::types::{DeviceProfile, Guid};

pub mod gf {
    /// Reduction polynomial x^8 + x^4 + x^3 + x^2 + 1.
    const POLY: u16 = 0x11D;

    pub fn mul(mut a: u8, mut b: u8) -> u8 {
        let mut acc = 0u8;
        while b != 0 {
            if b & 1 != 0 {
                acc ^= a;
            }
            let carry = a & 0x80 != 0;
            a <<= 1;
            if carry {
                a ^= (POLY & 0xFF) as u8;
            }
            b >>= 1;
        }
        acc
    }

    pub fn pow(a: u8, e: usize) -> u8 {
        (0..e).fold(1u8, |acc, _| mul(acc, a))
    }

    /// Brute force: the field is small enough.
    pub fn inv(a: u8) -> u8 {
        assert_ne!(a, 0, "zero has no inverse");
        (1..=255u8).find(|&b| mul(a, b) == 1).expect("every non-zero element is invertible")
    }

    pub type Mat = Vec<Vec<u8>>;

    pub fn matmul(a: &Mat, b: &Mat) -> Mat {
        let (rows, inner, cols) = (a.len(), b.len(), b[0].len());
        let mut out = vec![vec![0u8; cols]; rows];
        for r in 0..rows {
            for c in 0..cols {
                let mut acc = 0u8;
                for i in 0..inner {
                    acc ^= mul(a[r][i], b[i][c]);
                }
                out[r][c] = acc;
            }
        }
        out
    }

    /// Gauss-Jordan on `[m | I]`.
    pub fn invert(m: &Mat) -> Option<Mat> {
        let n = m.len();
        let mut aug: Mat = m
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let mut r = row.clone();
                r.extend((0..n).map(|j| u8::from(i == j)));
                r
            })
            .collect();
        for col in 0..n {
            let pivot = (col..n).find(|&r| aug[r][col] != 0)?;
            aug.swap(col, pivot);
            let scale = inv(aug[col][col]);
            for v in aug[col].iter_mut() {
                *v = mul(*v, scale);
            }
            for r in 0..n {
                if r != col && aug[r][col] != 0 {
                    let f = aug[r][col];
                    let pivot_row = aug[col].clone();
                    for (v, p) in aug[r].iter_mut().zip(pivot_row) {
                        *v ^= mul(f, p);
                    }
                }
            }
        }
        Some(aug.into_iter().map(|r| r[n..].to_vec()).collect())
    }

    /// Vandermonde rows `r^0 .. r^(k-1)` brought to systematic form.
    pub fn systematic_generator(k: usize, n: usize) -> Mat {
        let v: Mat = (0..n).map(|r| (0..k).map(|c| pow(r as u8, c)).collect()).collect();
        let top_inv = invert(&v[..k].to_vec()).expect("distinct points");
        matmul(&v, &top_inv)
    }
}

pub mod rs {
    use super::gf;

    /// The padded block the codec is expected to split: 4-byte big-endian
    /// length, data, zeros up to a multiple of `k`.
    pub fn pad(block: &[u8], k: usize) -> Vec<u8> {
        let mut p = (block.len() as u32).to_be_bytes().to_vec();
        p.extend_from_slice(block);
        let shard = p.len().div_ceil(k);
        p.resize(shard * k, 0);
        p
    }

    pub fn encode(block: &[u8], k: usize, n: usize) -> Vec<Vec<u8>> {
        let padded = pad(block, k);
        let len = padded.len() / k;
        let data: Vec<&[u8]> = padded.chunks(len).collect();
        let g = gf::systematic_generator(k, n);
        (0..n)
            .map(|row| {
                (0..len)
                    .map(|i| (0..k).fold(0u8, |acc, c| acc ^ gf::mul(g[row][c], data[c][i])))
                    .collect()
            })
            .collect()
    }

    /// Solve for the data shards from the shards at `rows`, then strip padding.
    pub fn decode(shards: &[(usize, Vec<u8>)], k: usize, n: usize) -> Vec<u8> {
        let g = gf::systematic_generator(k, n);
        let sub: gf::Mat = shards.iter().map(|(r, _)| g[*r].clone()).collect();
        let d = gf::invert(&sub).expect("any k rows are independent");
        let len = shards[0].1.len();
        let mut padded = Vec::with_capacity(len * k);
        for row in d.iter() {
            padded.extend((0..len).map(|i| {
                row.iter().zip(shards).fold(0u8, |acc, (&c, (_, s))| acc ^ gf::mul(c, s[i]))
            }));
        }
        let n_bytes = u32::from_be_bytes(padded[..4].try_into().unwrap()) as usize;
        padded[4..4 + n_bytes].to_vec()
    }
}

pub mod shamir {
    use super::gf;

    /// Secret byte at x = 0 from points `(x, y)` by Lagrange interpolation.
    pub fn interpolate_at_zero(points: &[(u8, u8)]) -> u8 {
        let mut acc = 0u8;
        for (i, &(xi, yi)) in points.iter().enumerate() {
            let mut num = 1u8;
            let mut den = 1u8;
            for (j, &(xj, _)) in points.iter().enumerate() {
                if i != j {
                    // (0 - xj) / (xi - xj); subtraction is xor.
                    num = gf::mul(num, xj);
                    den = gf::mul(den, xi ^ xj);
                }
            }
            acc ^= gf::mul(yi, gf::mul(num, gf::inv(den)));
        }
        acc
    }
}

pub fn guid(label: &str) -> Guid {
    Guid::synthetic(label)
}

/// `n` fully connected devices with plenty of storage and descending battery.
pub fn engine(n: usize, config: EngineConfig) -> StorageEngine {
    let devices = (0..n)
        .map(|i| DeviceProfile::new(guid(&format!("D{i}-")), 1024.0, 1000.0 - 10.0 * i as f64))
        .collect();
    StorageEngine::new(EngineSetup::fully_connected(devices, config)).expect("engine")
}

/// Deterministic bytes from a seed.
pub fn bytes(len: usize, seed: u64) -> Vec<u8> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut v = vec![0u8; len];
    rng.fill(&mut v[..]);
    v
}

/// Random derivations of the `dfs` grammar, with the parse each should give.
pub mod grammar {
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rdrive::command::{CommandAst, CommandOption, Flags, Permission};
    use rdrive::types::Guid;

    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789._";

    fn segment<R: Rng>(rng: &mut R) -> String {
        let len = rng.gen_range(1..12);
        (0..len).map(|_| *ALPHABET.choose(rng).unwrap() as char).collect()
    }

    pub fn rdrive_path<R: Rng>(rng: &mut R) -> String {
        if rng.gen_ratio(1, 10) {
            return "/".into();
        }
        (0..rng.gen_range(1..5)).map(|_| format!("/{}", segment(rng))).collect()
    }

    /// Local paths are relative or absolute; relative ones start with `./`
    /// so they can never read as keywords or GUIDs.
    pub fn local_path<R: Rng>(rng: &mut R) -> String {
        if rng.gen() {
            format!("./{}", segment(rng))
        } else {
            format!("/tmp/{}", segment(rng))
        }
    }

    pub fn guid<R: Rng>(rng: &mut R) -> Guid {
        Guid::random(rng)
    }

    fn permission<R: Rng>(rng: &mut R) -> Permission {
        match rng.gen_range(0..3) {
            0 => Permission::Owner,
            1 => Permission::World,
            _ => Permission::Users((0..rng.gen_range(1..4)).map(|_| guid(rng)).collect()),
        }
    }

    fn flags<R: Rng>(rng: &mut R) -> Flags {
        Flags {
            wa: rng.gen_ratio(1, 3).then(|| (rng.gen_range(0..=100) as f64) / 100.0),
            ttl: rng.gen_ratio(1, 3).then(|| rng.gen_range(1..10_000) as f64 / 4.0),
            block_size: rng.gen_ratio(1, 3).then(|| rng.gen_range(1..1usize << 24)),
        }
    }

    pub fn derivation<R: Rng>(rng: &mut R) -> CommandAst {
        let option = *CommandOption::ALL.choose(rng).unwrap();
        let mut ast = CommandAst {
            option,
            local_path: None,
            rdrive_path: Some(rdrive_path(rng)),
            permission: None,
            flags: flags(rng),
        };
        match option {
            CommandOption::Put => {
                ast.local_path = Some(local_path(rng));
                ast.permission = rng.gen::<bool>().then(|| permission(rng));
            }
            CommandOption::Get => ast.local_path = Some(local_path(rng)),
            CommandOption::Mkdir => ast.permission = rng.gen::<bool>().then(|| permission(rng)),
            CommandOption::Setfacl => ast.permission = Some(permission(rng)),
            CommandOption::Ls | CommandOption::Rm | CommandOption::Getfacl => {}
        }
        ast
    }

    /// Text with irregular whitespace between the words of `render`.
    pub fn spaced<R: Rng>(rng: &mut R, canonical: &str) -> String {
        let gaps = [" ", "  ", "\t", " \t "];
        let words: Vec<&str> = canonical.split(' ').collect();
        let mut out = String::new();
        if rng.gen_ratio(1, 4) {
            out.push(' ');
        }
        for (i, w) in words.iter().enumerate() {
            if i > 0 {
                out.push_str(gaps.choose(rng).unwrap());
            }
            out.push_str(w);
        }
        out
    }

    /// A broken variant of `ast` and the byte offset the error must point at.
    pub fn violation<R: Rng>(rng: &mut R, ast: &CommandAst) -> (String, usize) {
        let text = rdrive::command::render(ast);
        let words: Vec<&str> = text.split(' ').collect();
        let offset_of = |i: usize| words[..i].iter().map(|w| w.len() + 1).sum::<usize>();
        // Index of the first flag word, or the end.
        let first_flag = words.iter().position(|w| w.starts_with("--")).unwrap_or(words.len());
        match rng.gen_range(0..4) {
            // Drop a required argument; the parser then meets a flag,
            // a permission or the end where it wanted that argument.
            0 => {
                let range = match ast.option {
                    CommandOption::Put | CommandOption::Get => 3..4,
                    CommandOption::Setfacl => 3..first_flag,
                    _ => 2..3,
                };
                let start = range.start;
                let mut w = words.clone();
                w.drain(range);
                let joined = w.join(" ");
                let at = if start < w.len() { offset_of(start) } else { joined.len() };
                (joined, at)
            }
            // An extra positional word after the arguments.
            1 => {
                let mut w = words.clone();
                w.insert(first_flag, "./extra");
                let at = offset_of(first_flag);
                (w.join(" "), at)
            }
            // A 39- or 41-character would-be GUID where a permission is required.
            2 => {
                let len = if rng.gen() { 39 } else { 41 };
                let bad: String = (0..len).map(|_| 'a').collect();
                let path = ast.rdrive_path.clone().unwrap();
                let line = format!("dfs -setfacl {path} {bad}");
                (line, "dfs -setfacl ".len() + path.len() + 1)
            }
            // Missing command word.
            _ => {
                let joined = words[1..].join(" ");
                (joined, 0)
            }
        }
    }
}
