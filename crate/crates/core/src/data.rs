//! Rating datasets: loading, k-core filtering, the 80:20 split, the
//! synthetic imbalanced generator, and binding string IDs to dense indices.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel, StandardNormal};

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

use crate::error::{GrpError, Result};
use crate::features::{ratio_feature, RatioFeature};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RatingRecord {
    pub user_id: String,
    pub item_id: String,
    pub rating: u32,
}

impl RatingRecord {
    pub fn new(user_id: impl Into<String>, item_id: impl Into<String>, rating: u32) -> Self {
        RatingRecord {
            user_id: user_id.into(),
            item_id: item_id.into(),
            rating,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Csv,
    JsonLines,
}

impl FromStr for DataFormat {
    type Err = GrpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(DataFormat::Csv),
            "jsonl" | "json-lines" => Ok(DataFormat::JsonLines),
            other => Err(GrpError::config(format!("unknown data format '{other}'"))),
        }
    }
}

impl fmt::Display for DataFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataFormat::Csv => "csv",
            DataFormat::JsonLines => "jsonl",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub records: Vec<RatingRecord>,
    pub duplicates_removed: usize,
    pub row_errors: Vec<RowError>,
}

/// Malformed rows at or above this share of the input abort the load.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

/// Rounds half up, then clamps into `1..=c`.
pub fn round_rating(value: f64, c: usize) -> u32 {
    (value + 0.5).floor().clamp(1.0, c as f64) as u32
}

fn parse_rating(field: &str, c: usize) -> std::result::Result<u32, String> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| format!("rating '{field}' is not a number"))?;
    if !v.is_finite() {
        return Err(format!("rating '{field}' is not finite"));
    }
    Ok(round_rating(v, c))
}

pub fn load_ratings(path: &Path, format: DataFormat, c: usize) -> Result<LoadReport> {
    let file = File::open(path).map_err(|e| GrpError::io(path, e))?;
    read_ratings(file, format, c)
}

/// Reads `user_id,item_id,rating[,timestamp]` CSV (optional header) or JSON
/// lines with `reviewerID`, `asin`, `overall`. Duplicate (user, item)
/// pairs keep the last rating seen.
pub fn read_ratings<R: Read>(reader: R, format: DataFormat, c: usize) -> Result<LoadReport> {
    let mut rows: Vec<RatingRecord> = Vec::new();
    let mut row_errors = Vec::new();
    let mut total = 0u64;
    match format {
        DataFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new()
                .has_headers(false)
                .flexible(true)
                .trim(csv::Trim::All)
                .from_reader(reader);
            for (idx, rec) in rdr.records().enumerate() {
                let line = idx as u64 + 1;
                let rec = match rec {
                    Ok(r) => r,
                    Err(e) => {
                        total += 1;
                        row_errors.push(RowError { line, message: e.to_string() });
                        continue;
                    }
                };
                if idx == 0 && rec.get(0) == Some("user_id") {
                    continue;
                }
                if rec.len() == 1 && rec.get(0).is_some_and(str::is_empty) {
                    continue;
                }
                total += 1;
                if !(3..=4).contains(&rec.len()) {
                    row_errors.push(RowError {
                        line,
                        message: format!("expected 3 or 4 fields, got {}", rec.len()),
                    });
                    continue;
                }
                match parse_rating(&rec[2], c) {
                    Ok(r) if !rec[0].is_empty() && !rec[1].is_empty() => {
                        rows.push(RatingRecord::new(&rec[0], &rec[1], r))
                    }
                    Ok(_) => row_errors.push(RowError { line, message: "empty id".into() }),
                    Err(message) => row_errors.push(RowError { line, message }),
                }
            }
        }
        DataFormat::JsonLines => {
            for (idx, line) in BufReader::new(reader).lines().enumerate() {
                let lineno = idx as u64 + 1;
                let line = line.map_err(|e| GrpError::Data(format!("line {lineno}: {e}")))?;
                if line.trim().is_empty() {
                    continue;
                }
                total += 1;
                match parse_json_row(&line, c) {
                    Ok(r) => rows.push(r),
                    Err(message) => row_errors.push(RowError { line: lineno, message }),
                }
            }
        }
    }
    if total > 0 && row_errors.len() as f64 >= MAX_MALFORMED_FRACTION * total as f64 {
        let first = &row_errors[0];
        return Err(GrpError::Data(format!(
            "{} of {total} rows malformed (first at line {}: {})",
            row_errors.len(),
            first.line,
            first.message
        )));
    }
    for e in &row_errors {
        log::warn!("skipping line {}: {}", e.line, e.message);
    }
    let (records, duplicates_removed) = dedup_keep_last(rows);
    if duplicates_removed > 0 {
        log::info!("{duplicates_removed} duplicate (user, item) rows collapsed to their last rating");
    }
    Ok(LoadReport {
        records,
        duplicates_removed,
        row_errors,
    })
}

fn parse_json_row(line: &str, c: usize) -> std::result::Result<RatingRecord, String> {
    let v: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let text = |key: &str| -> std::result::Result<String, String> {
        match v.get(key) {
            Some(serde_json::Value::String(s)) if !s.is_empty() => Ok(s.clone()),
            Some(serde_json::Value::Number(n)) => Ok(n.to_string()),
            _ => Err(format!("missing field '{key}'")),
        }
    };
    let overall = v
        .get("overall")
        .and_then(serde_json::Value::as_f64)
        .ok_or_else(|| "missing numeric field 'overall'".to_string())?;
    if !overall.is_finite() {
        return Err("rating is not finite".into());
    }
    Ok(RatingRecord::new(text("reviewerID")?, text("asin")?, round_rating(overall, c)))
}

/// Keeps the first position of each (user, item) pair with its last rating.
fn dedup_keep_last(rows: Vec<RatingRecord>) -> (Vec<RatingRecord>, usize) {
    let mut index: HashMap<(String, String), usize> = HashMap::with_capacity(rows.len());
    let mut out: Vec<RatingRecord> = Vec::with_capacity(rows.len());
    let mut dups = 0;
    for r in rows {
        let key = (r.user_id.clone(), r.item_id.clone());
        match index.get(&key) {
            Some(&i) => {
                out[i].rating = r.rating;
                dups += 1;
            }
            None => {
                index.insert(key, out.len());
                out.push(r);
            }
        }
    }
    (out, dups)
}

pub fn write_ratings_csv(path: &Path, records: &[RatingRecord]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| GrpError::io(path, e))?;
    let mut buf = String::with_capacity(records.len() * 16);
    buf.push_str("user_id,item_id,rating\n");
    for r in records {
        buf.push_str(&format!("{},{},{}\n", r.user_id, r.item_id, r.rating));
    }
    f.write_all(buf.as_bytes()).map_err(|e| GrpError::io(path, e))
}

/// Repeatedly drops users and items with fewer than `k` interactions until
/// none remain.
pub fn k_core_filter(records: &[RatingRecord], k: usize) -> Result<Vec<RatingRecord>> {
    if k == 0 {
        return Err(GrpError::config("k-core needs k >= 1"));
    }
    let mut current: Vec<RatingRecord> = records.to_vec();
    loop {
        let mut user_deg: HashMap<&str, usize> = HashMap::new();
        let mut item_deg: HashMap<&str, usize> = HashMap::new();
        for r in &current {
            *user_deg.entry(&r.user_id).or_default() += 1;
            *item_deg.entry(&r.item_id).or_default() += 1;
        }
        let keep: Vec<bool> = current
            .iter()
            .map(|r| user_deg[r.user_id.as_str()] >= k && item_deg[r.item_id.as_str()] >= k)
            .collect();
        if keep.iter().all(|&x| x) {
            break;
        }
        let mut it = keep.into_iter();
        current.retain(|_| it.next().unwrap_or(false));
    }
    if current.is_empty() && !records.is_empty() {
        log::warn!("{k}-core filtering removed every record");
    }
    Ok(current)
}

/// A train/test partition. `train` is the instance set the loss sums over.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub train: Vec<RatingRecord>,
    pub test: Vec<RatingRecord>,
    pub seed: u64,
}

/// Seeded shuffle; the first `⌊0.8·N⌋` records train, the rest test.
pub fn split_80_20(records: &[RatingRecord], seed: u64) -> Result<SplitSpec> {
    if records.len() < 5 {
        return Err(GrpError::Data(format!(
            "need at least 5 records to split, got {}",
            records.len()
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = records.len() * 4 / 5;
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect();
    Ok(SplitSpec {
        train: pick(&order[..n_train]),
        test: pick(&order[n_train..]),
        seed,
    })
}

/// Level frequencies of the rating-ratio table rows, in percent / 100.
#[allow(clippy::approx_constant)] // 0.6931 is a rating share, not ln 2
pub const TABLE2_PRESETS: [(&str, [f64; 5]); 7] = [
    ("musical", [0.0197, 0.0231, 0.0729, 0.2037, 0.6806]),
    ("automotive", [0.0265, 0.0295, 0.0661, 0.1848, 0.6931]),
    ("office", [0.0226, 0.0315, 0.0894, 0.2685, 0.5880]),
    ("tool", [0.0390, 0.0369, 0.0787, 0.2060, 0.6394]),
    ("toys", [0.0291, 0.0380, 0.0947, 0.2166, 0.6216]),
    ("grocery", [0.0396, 0.0506, 0.1062, 0.2008, 0.6028]),
    ("patio", [0.0397, 0.0498, 0.1228, 0.2408, 0.5469]),
];

/// Synthetic dataset parameters.
///
/// Each user gets a generosity, each item a quality, and both a small latent
/// vector. The latent score of a pair is generosity + quality + scaled inner
/// product + noise; levels are then assigned by cutting the sorted scores at
/// the cumulative target ratios, so level frequencies match `level_ratios`
/// up to one record and the ordering of scores is preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub interactions: usize,
    pub level_ratios: Vec<f64>,
    pub seed: u64,
    pub user_scale: f64,
    pub item_scale: f64,
    pub interaction_scale: f64,
    pub noise: f64,
    pub latent_dim: usize,
    /// Draw generosity and quality from a standardised minimum-Gumbel
    /// (long lower tail: a few very harsh users, a few very poor items)
    /// instead of a standard normal.
    pub skewed: bool,
    /// Label for reports, e.g. `musical`.
    pub label: String,
}

impl SynthSpec {
    pub fn new(label: &str, level_ratios: Vec<f64>, seed: u64) -> Self {
        SynthSpec {
            num_users: 3000,
            num_items: 1200,
            interactions: 50_000,
            level_ratios,
            seed,
            user_scale: 1.0,
            item_scale: 0.6,
            interaction_scale: 0.6,
            noise: 0.8,
            latent_dim: 4,
            skewed: false,
            label: label.to_string(),
        }
    }

    /// Parses `table2:<name>` or `uniform`, optionally followed by
    /// `,key=value` overrides (`n`, `users`, `items`, `noise`, `seed`, ...).
    pub fn parse(spec: &str, default_seed: u64) -> Result<Self> {
        let mut parts = spec.split(',');
        let head = parts.next().unwrap_or_default().trim();
        let mut out = if head == "uniform" {
            SynthSpec::new("uniform", vec![0.2; 5], default_seed)
        } else if let Some(name) = head.strip_prefix("table2:") {
            let (label, ratios) = TABLE2_PRESETS
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| GrpError::config(format!("unknown rating-ratio preset '{name}'")))?;
            SynthSpec::new(label, ratios.to_vec(), default_seed)
        } else {
            return Err(GrpError::config(format!(
                "synthetic spec must start with 'table2:<name>' or 'uniform', got '{head}'"
            )));
        };
        for kv in parts {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| GrpError::config(format!("bad synth override '{kv}'")))?;
            let bad = || GrpError::config(format!("bad value for synth key '{k}': '{v}'"));
            match k.trim() {
                "n" => out.interactions = v.trim().parse().map_err(|_| bad())?,
                "users" => out.num_users = v.trim().parse().map_err(|_| bad())?,
                "items" => out.num_items = v.trim().parse().map_err(|_| bad())?,
                "seed" => out.seed = v.trim().parse().map_err(|_| bad())?,
                "noise" => out.noise = v.trim().parse().map_err(|_| bad())?,
                "user_scale" => out.user_scale = v.trim().parse().map_err(|_| bad())?,
                "item_scale" => out.item_scale = v.trim().parse().map_err(|_| bad())?,
                "interaction_scale" => out.interaction_scale = v.trim().parse().map_err(|_| bad())?,
                "latent_dim" => out.latent_dim = v.trim().parse().map_err(|_| bad())?,
                "skew" => {
                    out.skewed = match v.trim() {
                        "1" | "true" => true,
                        "0" | "false" => false,
                        _ => return Err(bad()),
                    }
                }
                other => return Err(GrpError::config(format!("unknown synth key '{other}'"))),
            }
        }
        Ok(out)
    }
}

/// Minimum user and item degree the generator guarantees.
pub const SYNTH_MIN_DEGREE: usize = 5;

pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<RatingRecord>> {
    let (nu, ni, n) = (spec.num_users, spec.num_items, spec.interactions);
    let c = spec.level_ratios.len();
    if c < 2 {
        return Err(GrpError::config("need at least two rating levels"));
    }
    let total: f64 = spec.level_ratios.iter().sum();
    if spec.level_ratios.iter().any(|&r| r.is_nan() || r < 0.0) || (total - 1.0).abs() > 1e-6 {
        return Err(GrpError::config(format!(
            "level ratios must be non-negative and sum to 1, got sum {total}"
        )));
    }
    if nu == 0 || ni == 0 {
        return Err(GrpError::config("need at least one user and one item"));
    }
    if n < SYNTH_MIN_DEGREE * nu || n < SYNTH_MIN_DEGREE * ni {
        return Err(GrpError::config(format!(
            "{n} interactions cannot give {nu} users and {ni} items degree {SYNTH_MIN_DEGREE}"
        )));
    }
    if n.saturating_mul(2) > nu.saturating_mul(ni) {
        return Err(GrpError::config(format!(
            "{n} interactions is too dense for {nu} users x {ni} items"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let user_deg = spread_degrees(nu, n, ni, &mut rng)?;
    let item_deg = spread_degrees(ni, n, nu, &mut rng)?;
    let pairs = match_stubs(&user_deg, &item_deg, &mut rng)?;

    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let effect = |rng: &mut ChaCha8Rng| -> f64 {
        if spec.skewed {
            // Minimum-Gumbel(0, 1) has mean -γ and standard deviation π/√6.
            let g: f64 = rng.sample(Gumbel::new(0.0, 1.0).expect("valid Gumbel"));
            (-g + EULER_GAMMA) / (std::f64::consts::PI / 6f64.sqrt())
        } else {
            normal(rng)
        }
    };
    let generosity: Vec<f64> = (0..nu).map(|_| spec.user_scale * effect(&mut rng)).collect();
    let quality: Vec<f64> = (0..ni).map(|_| spec.item_scale * effect(&mut rng)).collect();
    let dim = spec.latent_dim.max(1);
    let ua: Vec<Vec<f64>> = (0..nu).map(|_| (0..dim).map(|_| normal(&mut rng)).collect()).collect();
    let ib: Vec<Vec<f64>> = (0..ni).map(|_| (0..dim).map(|_| normal(&mut rng)).collect()).collect();
    let scores: Vec<f64> = pairs
        .iter()
        .map(|&(u, i)| {
            let dot: f64 = ua[u].iter().zip(&ib[i]).map(|(a, b)| a * b).sum();
            generosity[u]
                + quality[i]
                + spec.interaction_scale * dot / (dim as f64).sqrt()
                + spec.noise * normal(&mut rng)
        })
        .collect();

    let counts = level_counts(&spec.level_ratios, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ratings = vec![0u32; n];
    let mut pos = 0;
    for (level, &count) in counts.iter().enumerate() {
        for &idx in &order[pos..pos + count] {
            ratings[idx] = level as u32 + 1;
        }
        pos += count;
    }
    Ok(pairs
        .iter()
        .zip(ratings)
        .map(|(&(u, i), r)| RatingRecord::new(format!("u{u}"), format!("i{i}"), r))
        .collect())
}

/// Largest-remainder apportionment of `n` records over the ratios.
fn level_counts(ratios: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|x| x.floor() as usize).collect();
    let mut rem: Vec<(usize, f64)> = raw.iter().enumerate().map(|(i, x)| (i, x - x.floor())).collect();
    rem.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let short = n - counts.iter().sum::<usize>();
    for &(i, _) in rem.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// Degrees of at least [`SYNTH_MIN_DEGREE`] (at most `cap`) summing to
/// `total`, with a heavy-tailed spread above the floor.
fn spread_degrees(count: usize, total: usize, cap: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let mut deg = vec![SYNTH_MIN_DEGREE; count];
    let weights: Vec<f64> = (0..count)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (0.8 * z).exp()
        })
        .collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| GrpError::config(e.to_string()))?;
    let mut remaining = total - SYNTH_MIN_DEGREE * count;
    let mut guard = 0usize;
    while remaining > 0 {
        let k = dist.sample(rng);
        if deg[k] < cap {
            deg[k] += 1;
            remaining -= 1;
        }
        guard += 1;
        if guard > 100 * total {
            return Err(GrpError::config("could not place degrees under the cap"));
        }
    }
    Ok(deg)
}

/// Pairs user stubs with shuffled item stubs, then swaps away repeats.
fn match_stubs(user_deg: &[usize], item_deg: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize)>> {
    let users: Vec<usize> = user_deg.iter().enumerate().flat_map(|(u, &d)| std::iter::repeat_n(u, d)).collect();
    let mut items: Vec<usize> = item_deg.iter().enumerate().flat_map(|(i, &d)| std::iter::repeat_n(i, d)).collect();
    items.shuffle(rng);
    let n = users.len();
    let mut seen: HashMap<(usize, usize), usize> = HashMap::with_capacity(n);
    let mut dup_positions = Vec::new();
    for p in 0..n {
        let key = (users[p], items[p]);
        let e = seen.entry(key).or_insert(0);
        *e += 1;
        if *e > 1 {
            dup_positions.push(p);
        }
    }
    let mut attempts = 0usize;
    while let Some(p) = dup_positions.pop() {
        loop {
            attempts += 1;
            if attempts > 1000 * n.max(1) {
                return Err(GrpError::config("could not resolve repeated pairs"));
            }
            let q = rng.random_range(0..n);
            if q == p {
                continue;
            }
            let (a_old, b_old) = ((users[p], items[p]), (users[q], items[q]));
            let (a_new, b_new) = ((users[p], items[q]), (users[q], items[p]));
            if a_new == b_new || seen.contains_key(&a_new) || seen.contains_key(&b_new) {
                continue;
            }
            for key in [a_old, b_old] {
                let e = seen.get_mut(&key).expect("pair present");
                *e -= 1;
                if *e == 0 {
                    seen.remove(&key);
                }
            }
            seen.insert(a_new, 1);
            seen.insert(b_new, 1);
            items.swap(p, q);
            break;
        }
    }
    let unique: HashSet<(usize, usize)> = users.iter().copied().zip(items.iter().copied()).collect();
    debug_assert_eq!(unique.len(), n);
    Ok(users.into_iter().zip(items).collect())
}

/// One training or test interaction with dense indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Example {
    pub user: usize,
    pub item: usize,
    pub rating: u32,
}

/// A split bound to dense IDs, with ratio features computed from the
/// training records only. Index `num_users()` (resp. `num_items()`) is the
/// cold-start row for IDs unseen in training.
#[derive(Debug, Clone)]
pub struct BoundDataset {
    pub c: usize,
    pub users: Vec<String>,
    pub items: Vec<String>,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub user_histories: Vec<Vec<u32>>,
    pub item_histories: Vec<Vec<u32>>,
    pub user_ratios: Vec<RatioFeature>,
    pub item_ratios: Vec<RatioFeature>,
    pub train_mean: f64,
}

impl BoundDataset {
    pub fn bind(split: &SplitSpec, c: usize) -> Result<Self> {
        if split.train.is_empty() {
            return Err(GrpError::config("training split is empty"));
        }
        let mut users: Vec<String> = split.train.iter().map(|r| r.user_id.clone()).collect();
        let mut items: Vec<String> = split.train.iter().map(|r| r.item_id.clone()).collect();
        users.sort();
        users.dedup();
        items.sort();
        items.dedup();
        let uidx: HashMap<&str, usize> = users.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let iidx: HashMap<&str, usize> = items.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let (nu, ni) = (users.len(), items.len());
        let to_example = |r: &RatingRecord| -> Result<Example> {
            if r.rating == 0 || r.rating as usize > c {
                return Err(GrpError::Data(format!("rating {} outside 1..={c}", r.rating)));
            }
            Ok(Example {
                user: uidx.get(r.user_id.as_str()).copied().unwrap_or(nu),
                item: iidx.get(r.item_id.as_str()).copied().unwrap_or(ni),
                rating: r.rating,
            })
        };
        let train: Vec<Example> = split.train.iter().map(to_example).collect::<Result<_>>()?;
        let test: Vec<Example> = split.test.iter().map(to_example).collect::<Result<_>>()?;
        let mut user_histories = vec![Vec::new(); nu + 1];
        let mut item_histories = vec![Vec::new(); ni + 1];
        for e in &train {
            user_histories[e.user].push(e.rating);
            item_histories[e.item].push(e.rating);
        }
        let user_ratios = user_histories
            .iter()
            .map(|h| ratio_feature(h, c))
            .collect::<Result<_>>()?;
        let item_ratios = item_histories
            .iter()
            .map(|h| ratio_feature(h, c))
            .collect::<Result<_>>()?;
        let train_mean = train.iter().map(|e| e.rating as f64).sum::<f64>() / train.len() as f64;
        Ok(BoundDataset {
            c,
            users,
            items,
            train,
            test,
            user_histories,
            item_histories,
            user_ratios,
            item_ratios,
            train_mean,
        })
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(u: &str, i: &str, r: u32) -> RatingRecord {
        RatingRecord::new(u, i, r)
    }

    #[test]
    fn csv_rows_and_header() {
        let input = "user_id,item_id,rating,timestamp\nu1,i1,5,100\nu2,i1,3.5\n";
        let out = read_ratings(input.as_bytes(), DataFormat::Csv, 5).unwrap();
        assert_eq!(out.records, vec![rec("u1", "i1", 5), rec("u2", "i1", 4)]);
        let plain = read_ratings("u1,i1,5\n".as_bytes(), DataFormat::Csv, 5).unwrap();
        assert_eq!(plain.records, vec![rec("u1", "i1", 5)]);
    }

    #[test]
    fn json_lines_fields() {
        let input = r#"{"reviewerID":"A1","asin":"B1","overall":4.0,"reviewText":"fine"}"#;
        let out = read_ratings(input.as_bytes(), DataFormat::JsonLines, 5).unwrap();
        assert_eq!(out.records, vec![rec("A1", "B1", 4)]);
    }

    #[test]
    fn duplicates_keep_last_and_are_counted() {
        let input = "u1,i1,5\nu2,i2,1\nu1,i1,2\n";
        let out = read_ratings(input.as_bytes(), DataFormat::Csv, 5).unwrap();
        assert_eq!(out.duplicates_removed, 1);
        assert_eq!(out.records, vec![rec("u1", "i1", 2), rec("u2", "i2", 1)]);
    }

    #[test]
    fn ratings_round_half_up_and_clamp() {
        assert_eq!(round_rating(4.5, 5), 5);
        assert_eq!(round_rating(4.49, 5), 4);
        assert_eq!(round_rating(0.2, 5), 1);
        assert_eq!(round_rating(7.0, 5), 5);
    }

    #[test]
    fn malformed_rows_abort_above_one_percent() {
        let mut good = String::new();
        for k in 0..200 {
            good.push_str(&format!("u{k},i{k},4\n"));
        }
        let one_bad = format!("{good}u,x,notanumber\n");
        let err = read_ratings(one_bad.as_bytes(), DataFormat::Csv, 5);
        // 1 of 201 is below 1%.
        let out = err.unwrap();
        assert_eq!(out.row_errors.len(), 1);
        assert_eq!(out.row_errors[0].line, 201);
        let three_bad = format!("{good}a,b,x\nc,d,y\ne,f,z\n");
        assert!(matches!(
            read_ratings(three_bad.as_bytes(), DataFormat::Csv, 5),
            Err(GrpError::Data(_))
        ));
    }

    #[test]
    fn k_core_identity_cases() {
        let recs: Vec<RatingRecord> = (0..3)
            .flat_map(|u| (0..3).map(move |i| rec(&format!("u{u}"), &format!("i{i}"), 4)))
            .collect();
        assert_eq!(k_core_filter(&recs, 3).unwrap(), recs);
        assert_eq!(k_core_filter(&recs, 1).unwrap(), recs);
        assert!(k_core_filter(&recs, 0).is_err());
        assert!(k_core_filter(&recs, 4).unwrap().is_empty());
    }

    /// Brute-force oracle: remove one violating record at a time.
    fn k_core_oracle(records: &[RatingRecord], k: usize) -> Vec<RatingRecord> {
        let mut cur = records.to_vec();
        'outer: loop {
            for idx in 0..cur.len() {
                let ud = cur.iter().filter(|r| r.user_id == cur[idx].user_id).count();
                let id = cur.iter().filter(|r| r.item_id == cur[idx].item_id).count();
                if ud < k || id < k {
                    cur.remove(idx);
                    continue 'outer;
                }
            }
            return cur;
        }
    }

    #[test]
    fn k_core_cascades_on_toy_graph() {
        // Users a,b,c each rate items x,y,z; user d rates only x once; item w
        // is rated only by a. With k=3: d's record goes, w's record goes.
        let mut recs = Vec::new();
        for u in ["a", "b", "c"] {
            for i in ["x", "y", "z"] {
                recs.push(rec(u, i, 5));
            }
        }
        recs.push(rec("d", "x", 1));
        recs.push(rec("a", "w", 2));
        assert_eq!(recs.len(), 11);
        let expected = k_core_oracle(&recs, 3);
        assert_eq!(expected.len(), 9);
        assert_eq!(k_core_filter(&recs, 3).unwrap(), expected);

        // Cascade: removing e's only rating leaves item v with too few.
        let mut chain = recs.clone();
        chain.retain(|r| r.user_id != "d");
        chain.push(rec("e", "v", 1));
        chain.push(rec("a", "v", 1));
        chain.push(rec("b", "v", 1));
        let expected = k_core_oracle(&chain, 3);
        assert_eq!(k_core_filter(&chain, 3).unwrap(), expected);
    }

    #[test]
    fn split_floor_rule_and_determinism() {
        let recs: Vec<RatingRecord> = (0..101).map(|k| rec(&format!("u{k}"), "i", 3)).collect();
        let s = split_80_20(&recs[..100], 9).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (80, 20));
        let s = split_80_20(&recs, 9).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (80, 21));
        assert_eq!(s, split_80_20(&recs, 9).unwrap());
        assert_ne!(s.train, split_80_20(&recs, 10).unwrap().train);
        assert!(split_80_20(&recs[..4], 1).is_err());
    }

    #[test]
    fn synth_matches_target_ratios() {
        for (label, ratios) in [("musical", TABLE2_PRESETS[0].1.to_vec()), ("uniform", vec![0.2; 5])] {
            let mut spec = SynthSpec::new(label, ratios.clone(), 3);
            spec.interactions = 10_000;
            spec.num_users = 800;
            spec.num_items = 400;
            let recs = synth_generate(&spec).unwrap();
            assert_eq!(recs.len(), 10_000);
            for (k, target) in ratios.iter().enumerate() {
                let freq = recs.iter().filter(|r| r.rating == k as u32 + 1).count() as f64 / 1e4;
                assert!((freq - target).abs() <= 0.005, "{label} level {}: {freq}", k + 1);
            }
            assert_eq!(k_core_filter(&recs, 5).unwrap().len(), recs.len());
            assert_eq!(recs, synth_generate(&spec).unwrap());
        }
    }

    #[test]
    fn synth_rejects_infeasible_specs() {
        let mut spec = SynthSpec::new("x", vec![0.5, 0.6], 1);
        assert!(matches!(synth_generate(&spec), Err(GrpError::Config(_))));
        spec.level_ratios = vec![0.5, 0.5];
        spec.interactions = 100;
        assert!(synth_generate(&spec).is_err());
    }

    #[test]
    fn synth_spec_parsing() {
        let s = SynthSpec::parse("table2:musical,n=20000,users=1000", 4).unwrap();
        assert_eq!(s.level_ratios[4], 0.6806);
        assert_eq!((s.interactions, s.num_users, s.seed), (20_000, 1000, 4));
        assert!(SynthSpec::parse("table2:nothing", 1).is_err());
        assert!(SynthSpec::parse("cauchy", 1).is_err());
        assert!(SynthSpec::parse("uniform,bogus=1", 1).is_err());
    }

    #[test]
    fn binding_uses_training_ratings_only() {
        let train = vec![rec("a", "x", 5), rec("a", "y", 4), rec("b", "x", 1)];
        let test = vec![rec("a", "z", 1), rec("c", "x", 3)];
        let split = SplitSpec { train: train.clone(), test, seed: 0 };
        let ds = BoundDataset::bind(&split, 5).unwrap();
        assert_eq!(ds.num_users(), 2);
        assert_eq!(ds.user_ratios[0].q, vec![0.0, 0.0, 0.0, 0.5, 0.5]);
        // Unseen user and item fall back to the cold-start row.
        assert_eq!(ds.test[0].item, ds.num_items());
        assert_eq!(ds.test[1].user, ds.num_users());
        assert_eq!(ds.user_ratios[ds.num_users()].q, vec![0.2; 5]);
        let recomputed = ratio_feature(&[5, 4], 5).unwrap();
        assert_eq!(ds.user_ratios[0], recomputed);
        assert!((ds.train_mean - 10.0 / 3.0).abs() < 1e-12);
    }
}
