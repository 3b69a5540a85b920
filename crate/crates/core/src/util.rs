//! Small shared helpers: seed derivation and deterministic float formatting.

/// SplitMix64 step; the standard 64-bit mixer.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive an independent stream seed from a base seed and a stage tag.
///
/// Stable across platforms and runs; used so that every pipeline stage
/// (and every sweep point) draws from its own reproducible stream.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h = base ^ 0x51_7c_c1_b7_27_22_0a_95;
    for &b in tag.as_bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h)
}

/// Derive a seed from a base seed and an index (sweep points, tracks, ...).
pub fn derive_seed_indexed(base: u64, tag: &str, index: u64) -> u64 {
    splitmix64(derive_seed(base, tag) ^ splitmix64(index))
}

/// Format a float with 9 significant digits, `%g`-style: plain decimal for
/// moderate exponents, scientific otherwise, trailing zeros trimmed.
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".to_string()
        } else if x > 0.0 {
            "inf".to_string()
        } else {
            "-inf".to_string()
        };
    }
    // {:.8e} carries exactly 9 significant digits.
    let sci = format!("{:.8e}", x);
    let epos = sci.find('e').expect("exponent marker");
    let exp: i32 = sci[epos + 1..].parse().expect("exponent digits");
    if !(-5..9).contains(&exp) {
        // Keep scientific, trim zero tail of the mantissa.
        let mantissa = sci[..epos].trim_end_matches('0').trim_end_matches('.');
        return format!("{}e{}", mantissa, exp);
    }
    // Decimal with enough fractional digits for 9 significant ones.
    let frac = (8 - exp).max(0) as usize;
    let dec = format!("{:.*}", frac, x);
    if dec.contains('.') {
        dec.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        dec
    }
}
