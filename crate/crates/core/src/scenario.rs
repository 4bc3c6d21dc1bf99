//! Network instances: geometry, large-scale channel gains and economic
//! parameters for a set of InPs sharing a square service area.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

/// Distances below this are clamped before evaluating path loss.
pub const MIN_DISTANCE_M: f64 = 1.0;

/// RNG stream ids; every consumer of randomness draws from its own stream.
const STREAM_GEOMETRY: u64 = 1;
const STREAM_SHADOWING: u64 = 2;

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// A per-InP parameter. Accepts either a scalar (shared by every InP) or a
/// list with one entry per InP.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct PerInp(pub Vec<f64>);

impl PerInp {
    pub fn uniform(v: f64) -> Self {
        PerInp(vec![v])
    }

    pub fn get(&self, m: usize) -> f64 {
        if self.0.len() == 1 {
            self.0[0]
        } else {
            self.0[m]
        }
    }

    /// Returns a copy with entry `m` replaced, expanding a shared scalar first.
    pub fn with(&self, num_inps: usize, m: usize, v: f64) -> Self {
        let mut vals: Vec<f64> = (0..num_inps).map(|k| self.get(k)).collect();
        vals[m] = v;
        PerInp(vals)
    }

    fn check(&self, name: &str, num_inps: usize) -> Result<()> {
        if self.0.len() != 1 && self.0.len() != num_inps {
            return Err(Error::InvalidConfig(format!(
                "{name} has {} entries, expected 1 or {num_inps}",
                self.0.len()
            )));
        }
        if self.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(format!("{name} must be finite")));
        }
        Ok(())
    }
}

impl<'de> Deserialize<'de> for PerInp {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            One(f64),
            Many(Vec<f64>),
        }
        Ok(match Raw::deserialize(d)? {
            Raw::One(v) => PerInp(vec![v]),
            Raw::Many(v) => PerInp(v),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub area_side_m: f64,
    pub num_inps: usize,
    pub num_mvnos: usize,
    pub sbs_per_inp: usize,
    pub users_per_mvno: usize,
    /// Band of each InP, Hz.
    pub bandwidth_hz: PerInp,
    /// Total macro transmit power, dBm.
    pub macro_power_dbm: PerInp,
    /// Total small-cell transmit power, dBm.
    pub sbs_power_dbm: PerInp,
    /// Thermal noise power spectral density, W/Hz.
    pub noise_psd: f64,
    /// Residual self-interference gain after cancellation, dB.
    pub residual_si_db: PerInp,
    /// Price per unit bandwidth-power product.
    pub price: PerInp,
    /// Discount applied to small-cell resources, in (0, 1].
    pub sbs_weight: PerInp,
    /// What each user pays its MVNO.
    pub user_payment: f64,
    pub rng_seed: u64,
    pub pathloss_exponent: f64,
    pub shadowing_sigma_db: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            area_side_m: 1000.0,
            num_inps: 2,
            num_mvnos: 2,
            sbs_per_inp: 4,
            users_per_mvno: 20,
            bandwidth_hz: PerInp::uniform(10e6),
            macro_power_dbm: PerInp::uniform(46.0),
            sbs_power_dbm: PerInp::uniform(20.0),
            // -174 dBm/Hz
            noise_psd: dbm_to_watts(-174.0),
            residual_si_db: PerInp::uniform(-100.0),
            price: PerInp::uniform(5.0),
            sbs_weight: PerInp::uniform(1e-3),
            user_payment: 1e6,
            rng_seed: 1,
            pathloss_exponent: 3.76,
            shadowing_sigma_db: 8.0,
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(self.area_side_m > 0.0 && self.area_side_m.is_finite()) {
            return bad("area_side_m must be positive");
        }
        if self.num_inps == 0 {
            return bad("num_inps must be at least 1");
        }
        if self.num_mvnos == 0 {
            return bad("num_mvnos must be at least 1");
        }
        let m = self.num_inps;
        self.bandwidth_hz.check("bandwidth_hz", m)?;
        self.macro_power_dbm.check("macro_power_dbm", m)?;
        self.sbs_power_dbm.check("sbs_power_dbm", m)?;
        self.residual_si_db.check("residual_si_db", m)?;
        self.price.check("price", m)?;
        self.sbs_weight.check("sbs_weight", m)?;
        for k in 0..m {
            if self.bandwidth_hz.get(k) <= 0.0 {
                return bad("bandwidth_hz must be positive");
            }
            if self.price.get(k) < 0.0 {
                return bad("price must be non-negative");
            }
            let w = self.sbs_weight.get(k);
            if !(w > 0.0 && w <= 1.0) {
                return bad("sbs_weight must lie in (0, 1]");
            }
        }
        if !(self.noise_psd > 0.0 && self.noise_psd.is_finite()) {
            return bad("noise_psd must be positive");
        }
        if !(self.user_payment > 0.0 && self.user_payment.is_finite()) {
            return bad("user_payment must be positive");
        }
        if !(self.pathloss_exponent > 0.0 && self.pathloss_exponent.is_finite()) {
            return bad("pathloss_exponent must be positive");
        }
        if !(self.shadowing_sigma_db >= 0.0 && self.shadowing_sigma_db.is_finite()) {
            return bad("shadowing_sigma_db must be non-negative");
        }
        Ok(())
    }

    pub fn num_users(&self) -> usize {
        self.num_mvnos * self.users_per_mvno
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Large-scale gain of a link: `d^-exponent * 10^(shadowing/10)`, with `d`
/// clamped to [`MIN_DISTANCE_M`].
pub fn path_gain(tx: Point, rx: Point, exponent: f64, shadowing_db: f64) -> f64 {
    let d = tx.distance(&rx).max(MIN_DISTANCE_M);
    d.powf(-exponent) * db_to_linear(shadowing_db)
}

/// Identifies one base station. `slot == 0` is the InP's macro cell,
/// `slot >= 1` its small cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BsId {
    pub inp: usize,
    pub slot: usize,
}

impl BsId {
    pub fn is_macro(&self) -> bool {
        self.slot == 0
    }
}

/// An immutable network instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub macro_pos: Vec<Point>,
    /// `sbs_pos[m][j]` is small cell `j + 1` of InP `m`.
    pub sbs_pos: Vec<Vec<Point>>,
    pub user_pos: Vec<Point>,
    pub mvno_of_user: Vec<usize>,
    /// User to base-station gain, one column per base station (see [`Scenario::col`]).
    pub access_gain: Array2<f64>,
    /// Macro to small-cell gain, `M x S`.
    pub backhaul_gain: Array2<f64>,
    /// Small-cell to small-cell gain within each InP, `S x S` (diagonal unused).
    pub sbs_cross_gain: Vec<Array2<f64>>,
}

impl Scenario {
    pub fn num_users(&self) -> usize {
        self.user_pos.len()
    }

    pub fn num_inps(&self) -> usize {
        self.config.num_inps
    }

    pub fn sbs_per_inp(&self) -> usize {
        self.config.sbs_per_inp
    }

    pub fn bs_per_inp(&self) -> usize {
        self.config.sbs_per_inp + 1
    }

    /// Total number of base stations (association columns).
    pub fn num_bs(&self) -> usize {
        self.num_inps() * self.bs_per_inp()
    }

    pub fn col(&self, bs: BsId) -> usize {
        bs.inp * self.bs_per_inp() + bs.slot
    }

    pub fn bs(&self, col: usize) -> BsId {
        BsId {
            inp: col / self.bs_per_inp(),
            slot: col % self.bs_per_inp(),
        }
    }

    pub fn bandwidth(&self, m: usize) -> f64 {
        self.config.bandwidth_hz.get(m)
    }

    pub fn macro_power_w(&self, m: usize) -> f64 {
        dbm_to_watts(self.config.macro_power_dbm.get(m))
    }

    pub fn sbs_power_w(&self, m: usize) -> f64 {
        dbm_to_watts(self.config.sbs_power_dbm.get(m))
    }

    /// Macro transmit PSD, W/Hz.
    pub fn macro_psd(&self, m: usize) -> f64 {
        self.macro_power_w(m) / self.bandwidth(m)
    }

    /// Small-cell transmit PSD, W/Hz.
    pub fn sbs_psd(&self, m: usize) -> f64 {
        self.sbs_power_w(m) / self.bandwidth(m)
    }

    pub fn residual_si(&self, m: usize) -> f64 {
        db_to_linear(self.config.residual_si_db.get(m))
    }

    pub fn noise_psd(&self) -> f64 {
        self.config.noise_psd
    }

    pub fn price(&self, m: usize) -> f64 {
        self.config.price.get(m)
    }

    pub fn sbs_weight(&self, m: usize) -> f64 {
        self.config.sbs_weight.get(m)
    }

    pub fn payment(&self, _u: usize) -> f64 {
        self.config.user_payment
    }

    /// InP serving MVNO `i`'s users when infrastructure is not virtualized.
    pub fn home_inp(&self, mvno: usize) -> usize {
        mvno % self.num_inps()
    }

    /// Writes every gain entry as one CSV row.
    pub fn write_gains_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut out = out;
        writeln!(out, "# fdvrm scenario-gains v1")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["kind", "from", "to", "inp", "slot", "gain"])?;
        for u in 0..self.num_users() {
            for c in 0..self.num_bs() {
                let bs = self.bs(c);
                w.write_record([
                    "access".to_string(),
                    format!("user{u}"),
                    format!("bs{c}"),
                    bs.inp.to_string(),
                    bs.slot.to_string(),
                    format!("{:e}", self.access_gain[[u, c]]),
                ])?;
            }
        }
        for m in 0..self.num_inps() {
            for j in 0..self.sbs_per_inp() {
                w.write_record([
                    "backhaul".to_string(),
                    format!("macro{m}"),
                    format!("bs{}", self.col(BsId { inp: m, slot: j + 1 })),
                    m.to_string(),
                    (j + 1).to_string(),
                    format!("{:e}", self.backhaul_gain[[m, j]]),
                ])?;
            }
            for j in 0..self.sbs_per_inp() {
                for k in 0..self.sbs_per_inp() {
                    if j == k {
                        continue;
                    }
                    w.write_record([
                        "sbs_cross".to_string(),
                        format!("bs{}", self.col(BsId { inp: m, slot: k + 1 })),
                        format!("bs{}", self.col(BsId { inp: m, slot: j + 1 })),
                        m.to_string(),
                        (j + 1).to_string(),
                        format!("{:e}", self.sbs_cross_gain[m][[j, k]]),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn uniform_point(rng: &mut ChaCha8Rng, side: f64) -> Point {
    Point::new(rng.random::<f64>() * side, rng.random::<f64>() * side)
}

/// Builds a scenario. Macro cells sit at the centres of `M` equal vertical
/// strips; small cells and users are uniform over the square. Users are
/// assigned to MVNOs in contiguous blocks.
pub fn generate_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let side = config.area_side_m;
    let m_count = config.num_inps;
    let s_count = config.sbs_per_inp;
    let u_count = config.num_users();

    let mut geo = ChaCha8Rng::seed_from_u64(config.rng_seed);
    geo.set_stream(STREAM_GEOMETRY);
    let mut shadow_rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    shadow_rng.set_stream(STREAM_SHADOWING);
    let normal = Normal::new(0.0, config.shadowing_sigma_db)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut shadow = || {
        if config.shadowing_sigma_db == 0.0 {
            0.0
        } else {
            normal.sample(&mut shadow_rng)
        }
    };

    let strip = side / m_count as f64;
    let macro_pos: Vec<Point> = (0..m_count)
        .map(|m| Point::new(strip * (m as f64 + 0.5), side / 2.0))
        .collect();
    let sbs_pos: Vec<Vec<Point>> = (0..m_count)
        .map(|_| (0..s_count).map(|_| uniform_point(&mut geo, side)).collect())
        .collect();
    let user_pos: Vec<Point> = (0..u_count).map(|_| uniform_point(&mut geo, side)).collect();
    let mvno_of_user: Vec<usize> = (0..u_count).map(|u| u / config.users_per_mvno.max(1)).collect();

    let e = config.pathloss_exponent;
    let bs_per_inp = s_count + 1;
    let mut access_gain = Array2::zeros((u_count, m_count * bs_per_inp));
    for (u, up) in user_pos.iter().enumerate() {
        for m in 0..m_count {
            access_gain[[u, m * bs_per_inp]] = path_gain(macro_pos[m], *up, e, shadow());
            for j in 0..s_count {
                access_gain[[u, m * bs_per_inp + j + 1]] = path_gain(sbs_pos[m][j], *up, e, shadow());
            }
        }
    }
    let mut backhaul_gain = Array2::zeros((m_count, s_count));
    for m in 0..m_count {
        for j in 0..s_count {
            backhaul_gain[[m, j]] = path_gain(macro_pos[m], sbs_pos[m][j], e, shadow());
        }
    }
    let mut sbs_cross_gain = Vec::with_capacity(m_count);
    for m in 0..m_count {
        let mut g = Array2::zeros((s_count, s_count));
        for j in 0..s_count {
            for k in (j + 1)..s_count {
                let v = path_gain(sbs_pos[m][j], sbs_pos[m][k], e, shadow());
                g[[j, k]] = v;
                g[[k, j]] = v;
            }
        }
        sbs_cross_gain.push(g);
    }

    Ok(Scenario {
        config: config.clone(),
        macro_pos,
        sbs_pos,
        user_pos,
        mvno_of_user,
        access_gain,
        backhaul_gain,
        sbs_cross_gain,
    })
}

pub fn write_scenario_csv(scenario: &Scenario, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    scenario.write_gains_csv(std::io::BufWriter::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_config(seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            rng_seed: seed,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn default_layout_counts() {
        let s = generate_scenario(&default_config(7)).unwrap();
        assert_eq!(s.macro_pos.len(), 2);
        assert_eq!(s.sbs_pos.iter().map(Vec::len).sum::<usize>(), 8);
        assert_eq!(s.num_users(), 40);
        assert_eq!(s.num_bs(), 10);
        assert_eq!(s.macro_pos[0], Point::new(250.0, 500.0));
        assert_eq!(s.macro_pos[1], Point::new(750.0, 500.0));
    }

    #[test]
    fn zero_users_is_valid() {
        let cfg = ScenarioConfig {
            users_per_mvno: 0,
            ..default_config(3)
        };
        let s = generate_scenario(&cfg).unwrap();
        assert_eq!(s.num_users(), 0);
        assert_eq!(s.access_gain.dim(), (0, 10));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_scenario(&default_config(11)).unwrap();
        let b = generate_scenario(&default_config(11)).unwrap();
        assert_eq!(a, b);
        let c = generate_scenario(&default_config(12)).unwrap();
        assert_ne!(a.access_gain, c.access_gain);
    }

    #[test]
    fn gains_positive_and_membership_partitions() {
        let s = generate_scenario(&default_config(5)).unwrap();
        assert!(s.access_gain.iter().all(|g| *g > 0.0 && g.is_finite()));
        assert!(s.backhaul_gain.iter().all(|g| *g > 0.0 && g.is_finite()));
        let mut counts = vec![0; s.config.num_mvnos];
        for &i in &s.mvno_of_user {
            counts[i] += 1;
        }
        assert_eq!(counts.iter().sum::<usize>(), s.num_users());
        assert!(counts.iter().all(|&c| c == 20));
    }

    #[test]
    fn path_gain_examples() {
        let o = Point::new(0.0, 0.0);
        assert_eq!(path_gain(o, Point::new(1.0, 0.0), 3.76, 0.0), 1.0);
        let g = path_gain(o, Point::new(100.0, 0.0), 2.0, 0.0);
        assert!((g - 1e-4).abs() < 1e-18);
        let coincident = path_gain(o, o, 3.76, 0.0);
        assert_eq!(coincident, 1.0);
        assert!(coincident.is_finite());
    }

    #[test]
    fn doubling_distance_scales_by_power_of_two() {
        for &e in &[2.0, 3.0, 3.76] {
            let a = path_gain(Point::new(0.0, 0.0), Point::new(30.0, 40.0), e, 0.0);
            let b = path_gain(Point::new(0.0, 0.0), Point::new(60.0, 80.0), e, 0.0);
            assert!((b / a - 2f64.powf(-e)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = default_config(1);
        c.area_side_m = 0.0;
        assert!(generate_scenario(&c).is_err());
        let mut c = default_config(1);
        c.bandwidth_hz = PerInp(vec![-1.0]);
        assert!(generate_scenario(&c).is_err());
        let mut c = default_config(1);
        c.sbs_weight = PerInp(vec![0.5, 0.5, 0.5]);
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_scalar_and_list() {
        let cfg = ScenarioConfig::from_toml_str(
            "num_inps = 2\nsbs_weight = [1.0, 0.001]\nprice = 4.0\nrng_seed = 9\n",
        )
        .unwrap();
        assert_eq!(cfg.sbs_weight.get(1), 0.001);
        assert_eq!(cfg.price.get(0), 4.0);
        assert_eq!(cfg.price.get(1), 4.0);
        assert_eq!(cfg.rng_seed, 9);
        assert!(ScenarioConfig::from_toml_str("bogus_key = 1").is_err());
    }

    #[test]
    fn gains_csv_has_one_row_per_entry() {
        let cfg = ScenarioConfig {
            users_per_mvno: 2,
            sbs_per_inp: 2,
            ..default_config(2)
        };
        let s = generate_scenario(&cfg).unwrap();
        let mut buf = Vec::new();
        s.write_gains_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let rows = text.lines().count() - 2;
        assert_eq!(rows, 4 * 6 + 2 * 2 + 2 * 2);
    }
}
