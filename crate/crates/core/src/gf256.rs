//! Arithmetic in GF(2^8) modulo the primitive polynomial
//! x^8 + x^4 + x^3 + x^2 + 1 (0x11D), with 2 as the generator.
//!
//! Log/exp tables are built at compile time. The exp table is doubled so
//! `mul` can index `log(a) + log(b)` without reducing mod 255.

const POLY: u32 = 0x11D;

const fn build_exp() -> [u8; 512] {
    let mut exp = [0u8; 512];
    let mut x: u32 = 1;
    let mut i = 0;
    while i < 255 {
        exp[i] = x as u8;
        exp[i + 255] = x as u8;
        x <<= 1;
        if x & 0x100 != 0 {
            x ^= POLY;
        }
        i += 1;
    }
    // Indices 510 and 511 stay zero; log(a) + log(b) never exceeds 508.
    exp
}

const fn build_log() -> [u8; 256] {
    let exp = build_exp();
    let mut log = [0u8; 256];
    let mut i = 0;
    while i < 255 {
        log[exp[i] as usize] = i as u8;
        i += 1;
    }
    log
}

static EXP: [u8; 512] = build_exp();
static LOG: [u8; 256] = build_log();

#[inline]
pub fn mul(a: u8, b: u8) -> u8 {
    if a == 0 || b == 0 {
        0
    } else {
        EXP[LOG[a as usize] as usize + LOG[b as usize] as usize]
    }
}

/// Multiplicative inverse of a nonzero element.
#[inline]
pub fn inv(a: u8) -> u8 {
    debug_assert!(a != 0, "zero has no inverse");
    EXP[255 - LOG[a as usize] as usize]
}

/// `a / b` for nonzero `b`.
#[inline]
pub fn div(a: u8, b: u8) -> u8 {
    if a == 0 {
        0
    } else {
        EXP[LOG[a as usize] as usize + 255 - LOG[b as usize] as usize]
    }
}

/// `base` raised to `e`.
pub fn pow(base: u8, e: u32) -> u8 {
    if e == 0 {
        1
    } else if base == 0 {
        0
    } else {
        EXP[(LOG[base as usize] as u32 * (e % 255)) as usize % 255]
    }
}
