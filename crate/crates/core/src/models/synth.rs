//! Small synthetic datasets in the on-disk formats the loaders accept.

use std::fmt::Write;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};

use super::data::{FRISK_ETHNICITIES, FRISK_PRECINCTS};

/// Feature count that gives the logistic model `d_z = 120`.
pub const A1A_WIDTH: usize = 119;
const A1A_ACTIVE: usize = 14;

pub const REDWINE_COLUMNS: [&str; 12] = [
    "fixed acidity",
    "volatile acidity",
    "citric acid",
    "residual sugar",
    "chlorides",
    "free sulfur dioxide",
    "total sulfur dioxide",
    "density",
    "pH",
    "sulphates",
    "alcohol",
    "quality",
];

/// Binary sparse rows with labels drawn from a logistic model. The last row
/// always uses index `width`, so the parsed width equals `width`.
pub fn a1a_libsvm<G: Rng + ?Sized>(n: usize, width: usize, rng: &mut G) -> String {
    let weights: Vec<f64> = (0..width).map(|_| 0.8 * rng.sample::<f64, _>(StandardNormal)).collect();
    let active = A1A_ACTIVE.min(width);
    let mut out = String::new();
    for i in 0..n {
        let mut idx: Vec<usize> = index::sample(rng, width, active).into_iter().collect();
        if i + 1 == n && !idx.contains(&(width - 1)) {
            idx[0] = width - 1;
        }
        idx.sort_unstable();
        let eta: f64 = -0.5 + idx.iter().map(|&j| weights[j]).sum::<f64>() / (active as f64).sqrt();
        let p = 1.0 / (1.0 + (-eta).exp());
        let label = if rng.gen::<f64>() < p { "+1" } else { "-1" };
        out.push_str(label);
        for j in idx {
            write!(out, " {}:1", j + 1).unwrap();
        }
        out.push('\n');
    }
    out
}

/// A 3 × 32 frisk table drawn from the hierarchical Poisson model.
pub fn frisk_csv<G: Rng + ?Sized>(rng: &mut G) -> String {
    let alpha = [0.4, -0.3, 0.0];
    let beta: Vec<f64> = (0..FRISK_PRECINCTS)
        .map(|_| Normal::new(0.0, 0.6).unwrap().sample(rng))
        .collect();
    let mu = -0.8;
    let mut out = String::from("eth,precinct,stops,arrests\n");
    for (e, a) in alpha.iter().enumerate().take(FRISK_ETHNICITIES) {
        for (p, b) in beta.iter().enumerate() {
            let arrests: u32 = rng.gen_range(20..400);
            let rate = (mu + a + b).exp() * f64::from(arrests) / 15.0;
            let stops = Poisson::new(rate).unwrap().sample(rng) as u64;
            writeln!(out, "{},{},{},{}", e + 1, p + 1, stops, arrests).unwrap();
        }
    }
    out
}

/// Semicolon-separated wine-quality style table with `n` rows.
pub fn redwine_csv<G: Rng + ?Sized>(n: usize, rng: &mut G) -> String {
    let centre = [8.3, 0.53, 0.27, 2.5, 0.087, 15.9, 46.5, 0.9967, 3.31, 0.66, 10.4];
    let spread = [1.7, 0.18, 0.19, 1.4, 0.047, 10.5, 32.9, 0.0019, 0.15, 0.17, 1.07];
    let header: Vec<String> = REDWINE_COLUMNS.iter().map(|c| format!("\"{c}\"")).collect();
    let mut out = header.join(";");
    out.push('\n');
    for _ in 0..n {
        let u: Vec<f64> = (0..centre.len())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let signal = 0.45 * u[10] - 0.35 * u[1] + 0.2 * u[9] + 0.15 * (u[10] * u[9]).tanh();
        let noise: f64 = 0.6 * rng.sample::<f64, _>(StandardNormal);
        let quality = (5.6 + signal + noise).round().clamp(3.0, 8.0);
        let row: Vec<String> = u
            .iter()
            .zip(centre.iter().zip(&spread))
            .map(|(z, (c, s))| format!("{:.5}", (c + s * z).max(0.0)))
            .collect();
        writeln!(out, "{};{}", row.join(";"), quality).unwrap();
    }
    out
}

/// Observations for the conjugate toy: `x_i ~ N(z*, 1)` with `z* ~ N(0, 1)`.
pub fn toy_observations<G: Rng + ?Sized>(n: usize, rng: &mut G) -> Vec<f64> {
    let truth: f64 = rng.sample(StandardNormal);
    (0..n).map(|_| truth + rng.sample::<f64, _>(StandardNormal)).collect()
}
