//! Seeded 3-D value noise used for procedural albedo.

use crate::camera::Vec3;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn lattice(seed: u64, x: i64, y: i64, z: i64) -> f64 {
    let h = splitmix(
        seed ^ splitmix((x as u64).wrapping_mul(0x1F1F_1F1F) ^ splitmix((y as u64) ^ splitmix(z as u64))),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn fade(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Trilinearly interpolated lattice noise in `[0, 1)`.
pub fn value_noise(seed: u64, p: Vec3) -> f64 {
    let base = p.map(f64::floor);
    let f = [p[0] - base[0], p[1] - base[1], p[2] - base[2]].map(fade);
    let (x0, y0, z0) = (base[0] as i64, base[1] as i64, base[2] as i64);
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dx == 1 { f[0] } else { 1.0 - f[0] })
                    * (if dy == 1 { f[1] } else { 1.0 - f[1] })
                    * (if dz == 1 { f[2] } else { 1.0 - f[2] });
                acc += w * lattice(seed, x0 + dx, y0 + dy, z0 + dz);
            }
        }
    }
    acc
}

/// Two-octave fractal noise in `[0, 1)`.
pub fn fractal_noise(seed: u64, p: Vec3, frequency: f64) -> f64 {
    let a = value_noise(seed, p.map(|v| v * frequency));
    let b = value_noise(seed.wrapping_add(1), p.map(|v| v * frequency * 2.0));
    (2.0 * a + b) / 3.0
}
