//! Synthetic multi-city mobility data and its on-disk formats.
//!
//! Each city is a set of small spatial clusters. A cluster holds one location
//! per anchor role, and a role's POI mix is dominated by the same category in
//! every city, so the semantics carry across cities. A user is bound to one
//! cluster and moves between its anchors; the next role is a fixed function
//! of the current role and whether the current time-of-day slot is in the
//! first or second half of the day. With `noise = 0` the next location is
//! therefore determined by `(current location, time slot)`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{normalize_coords, popularity_rank, LocationFeatures};
use crate::params::{name_seed, splitmix64};
use crate::traj::{tod_slot, Step, Trajectory, TOD_SLOTS};

/// 2024-01-01 00:00:00 UTC.
pub const DEFAULT_START_EPOCH: i64 = 1_704_067_200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub id: usize,
    pub poi_counts: Vec<u32>,
    pub lat: f64,
    pub lon: f64,
    pub flow: f64,
}

/// A city with dense location ids `0..N` and derived normalized coordinates
/// and popularity buckets.
#[derive(Debug, Clone, PartialEq)]
pub struct City {
    pub id: usize,
    pub categories: usize,
    pub locations: Vec<Location>,
    normalized: Vec<(f64, f64)>,
    ranks: Vec<usize>,
}

impl City {
    pub fn new(id: usize, categories: usize, mut locations: Vec<Location>) -> Result<Self> {
        if locations.is_empty() {
            return Err(Error::Empty(format!("city {id} has no locations")));
        }
        locations.sort_by_key(|l| l.id);
        for (i, l) in locations.iter().enumerate() {
            if l.id != i {
                return Err(Error::invalid(format!("city {id}: location ids must be dense, missing {i}")));
            }
            if l.poi_counts.len() != categories {
                return Err(Error::invalid(format!(
                    "city {id}: location {i} has {} POI counts, expected {categories}",
                    l.poi_counts.len()
                )));
            }
        }
        let coords: Vec<(f64, f64)> = locations.iter().map(|l| (l.lat, l.lon)).collect();
        let flows: Vec<f64> = locations.iter().map(|l| l.flow).collect();
        Ok(Self {
            id,
            categories,
            normalized: normalize_coords(&coords)?,
            ranks: popularity_rank(&flows)?,
            locations,
        })
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn normalized_coords(&self) -> &[(f64, f64)] {
        &self.normalized
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn features(&self, location: usize) -> Result<LocationFeatures> {
        let l = self.locations.get(location).ok_or(Error::UnknownLocation {
            location,
            city: self.id,
        })?;
        Ok(LocationFeatures {
            poi_counts: l.poi_counts.clone(),
            coord: self.normalized[location],
            popularity_rank: self.ranks[location],
        })
    }

    pub fn all_features(&self) -> Vec<LocationFeatures> {
        (0..self.len()).map(|i| self.features(i).expect("dense ids")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub cities: usize,
    pub locations: usize,
    pub categories: usize,
    pub users: usize,
    pub days: u32,
    /// Anchor locations per user.
    pub anchors: usize,
    /// Probability that a move ignores the schedule and picks a uniformly
    /// random anchor instead.
    pub noise: f64,
    /// When false the schedule ignores time of day.
    pub time_conditioned: bool,
    pub min_gap_minutes: u32,
    pub max_gap_minutes: u32,
    pub start_epoch: i64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cities: 3,
            locations: 50,
            categories: 8,
            users: 200,
            days: 14,
            anchors: 3,
            noise: 0.0,
            time_conditioned: true,
            min_gap_minutes: 120,
            max_gap_minutes: 300,
            start_epoch: DEFAULT_START_EPOCH,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.locations < 2 {
            return Err(Error::config("a city needs at least 2 locations"));
        }
        if self.categories == 0 {
            return Err(Error::config("at least one POI category is required"));
        }
        if self.anchors == 0 {
            return Err(Error::config("at least one anchor per user is required"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::config(format!("noise {} outside [0, 1]", self.noise)));
        }
        if self.min_gap_minutes == 0 || self.min_gap_minutes > self.max_gap_minutes {
            return Err(Error::config("gap range must satisfy 0 < min <= max"));
        }
        Ok(())
    }

    fn anchors_for(&self, n: usize) -> usize {
        self.anchors.min(n)
    }
}

/// A generated city plus the anchor layout the trajectory generator needs.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCity {
    pub city: City,
    /// `groups[g][role]` is the location id playing `role` in cluster `g`.
    pub groups: Vec<Vec<usize>>,
}

impl SyntheticCity {
    pub fn role_of(&self, location: usize) -> Option<(usize, usize)> {
        self.groups.iter().enumerate().find_map(|(g, members)| {
            members.iter().position(|&l| l == location).map(|r| (g, r))
        })
    }
}

fn derive_rng(seed: u64, tag: &str, a: u64, b: u64) -> ChaCha8Rng {
    let s = name_seed(seed, tag) ^ splitmix64(a.wrapping_mul(0x9e37_79b9) ^ splitmix64(b));
    ChaCha8Rng::seed_from_u64(s)
}

/// Next anchor role under the deterministic schedule.
pub fn scheduled_role(role: usize, tod: usize, anchors: usize, time_conditioned: bool) -> usize {
    let half = usize::from(time_conditioned && tod >= TOD_SLOTS / 2);
    (role + 1 + half) % anchors
}

pub fn gen_city(cfg: &GeneratorConfig, index: usize) -> Result<SyntheticCity> {
    cfg.validate()?;
    let mut rng = derive_rng(cfg.seed, "city", index as u64, 0);
    let n = cfg.locations;
    let a = cfg.anchors_for(n);
    let n_groups = n / a;
    let leftover = n - n_groups * a;
    let clusters = n_groups + usize::from(leftover > 0);
    let side = (clusters as f64).sqrt().ceil() as usize;

    let spacing = rng.gen_range(0.005..0.02);
    let origin = (rng.gen_range(25.0..48.0), rng.gen_range(-122.0..-71.0));
    let mut cells: Vec<usize> = (0..side * side).collect();
    cells.shuffle(&mut rng);

    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng);
    let flow_dist = Normal::new(0.0, 1.2).expect("valid normal");

    let mut locations = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n_groups);
    let mut slot = 0;
    for cluster in 0..clusters {
        let cell = cells[cluster];
        let cx = origin.0 + (cell / side) as f64 * spacing;
        let cy = origin.1 + (cell % side) as f64 * spacing;
        let members = if cluster < n_groups { a } else { leftover };
        let mut group = Vec::with_capacity(members);
        for role in 0..members {
            let id = ids[slot];
            slot += 1;
            let jitter = 0.12 * spacing;
            let lat = cx + rng.gen_range(-jitter..jitter);
            let lon = cy + rng.gen_range(-jitter..jitter);
            let dominant = role % cfg.categories;
            let poi_counts = (0..cfg.categories)
                .map(|c| {
                    if c == dominant {
                        rng.gen_range(6..=14)
                    } else if rng.gen_bool(0.25) {
                        rng.gen_range(1..=3)
                    } else {
                        0
                    }
                })
                .collect();
            let z: f64 = flow_dist.sample(&mut rng);
            let flow = (200.0 * z.exp() * 100.0).round() / 100.0;
            locations.push(Location {
                id,
                poi_counts,
                lat,
                lon,
                flow,
            });
            group.push(id);
        }
        if cluster < n_groups {
            groups.push(group);
        }
    }
    Ok(SyntheticCity {
        city: City::new(index, cfg.categories, locations)?,
        groups,
    })
}

/// One raw (unwindowed) trajectory per user, in user order.
pub fn gen_trajectories(city: &SyntheticCity, cfg: &GeneratorConfig) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    if city.groups.is_empty() {
        return Err(Error::config("city has no anchor groups"));
    }
    let a = city.groups[0].len();
    let end = cfg.start_epoch + i64::from(cfg.days) * 86_400;
    let mut out = Vec::with_capacity(cfg.users);
    for user in 0..cfg.users {
        let mut rng = derive_rng(cfg.seed, "user", city.city.id as u64, user as u64);
        let group = &city.groups[user % city.groups.len()];
        let mut role = rng.gen_range(0..a);
        let mut t = cfg.start_epoch + 60 * rng.gen_range(0..24 * 60);
        let mut steps = Vec::new();
        while t < end {
            steps.push(Step {
                location: group[role],
                time: t,
            });
            let explore = rng.gen::<f64>() < cfg.noise;
            let random_role = rng.gen_range(0..a);
            role = if explore {
                random_role
            } else {
                scheduled_role(role, tod_slot(t), a, cfg.time_conditioned)
            };
            t += 60 * i64::from(rng.gen_range(cfg.min_gap_minutes..=cfg.max_gap_minutes));
        }
        out.push(Trajectory::new(user as u64, city.city.id, steps)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub window_days: u32,
    pub min_len: usize,
    /// Windows longer than this are split into consecutive chunks.
    pub max_len: Option<usize>,
    /// Overlapping windows starting every `stride_hours`; `None` means
    /// consecutive non-overlapping windows.
    pub stride_hours: Option<u32>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            window_days: 3,
            min_len: 5,
            max_len: None,
            stride_hours: None,
        }
    }
}

/// Cuts each raw user stream into time windows anchored at the user's first
/// arrival, splits windows longer than `max_len`, and drops pieces shorter
/// than `min_len`.
pub fn preprocess(raw: &[Trajectory], cfg: &PreprocessConfig) -> Vec<Trajectory> {
    let window = i64::from(cfg.window_days) * 86_400;
    let mut out = Vec::new();
    for traj in raw {
        let Some(first) = traj.steps.first() else { continue };
        let t0 = first.time;
        let mut windows: Vec<Vec<Step>> = Vec::new();
        match cfg.stride_hours {
            None => {
                let mut by_index: BTreeMap<i64, Vec<Step>> = BTreeMap::new();
                for s in &traj.steps {
                    by_index.entry((s.time - t0).div_euclid(window.max(1))).or_default().push(*s);
                }
                windows.extend(by_index.into_values());
            }
            Some(stride) => {
                let stride = i64::from(stride.max(1)) * 3600;
                let last = traj.steps.last().map_or(t0, |s| s.time);
                let mut start = t0;
                while start <= last {
                    windows.push(
                        traj.steps
                            .iter()
                            .filter(|s| s.time >= start && s.time < start + window)
                            .copied()
                            .collect(),
                    );
                    start += stride;
                }
            }
        }
        for w in windows {
            let chunk = cfg.max_len.unwrap_or(usize::MAX).max(1);
            for piece in w.chunks(chunk) {
                if piece.len() >= cfg.min_len {
                    out.push(Trajectory {
                        user_id: traj.user_id,
                        city_id: traj.city_id,
                        steps: piece.to_vec(),
                    });
                }
            }
        }
    }
    out
}

/// A city and its trajectories as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct CityDataset {
    pub city: City,
    pub trajectories: Vec<Trajectory>,
}

/// Generates every city of `cfg` with raw per-user trajectories.
pub fn generate(cfg: &GeneratorConfig) -> Result<Vec<CityDataset>> {
    (0..cfg.cities)
        .map(|i| {
            let sc = gen_city(cfg, i)?;
            let trajectories = gen_trajectories(&sc, cfg)?;
            Ok(CityDataset {
                city: sc.city,
                trajectories,
            })
        })
        .collect()
}

pub fn city_file_name(id: usize) -> String {
    format!("city_{id}.csv")
}

pub fn trajectory_file_name(id: usize) -> String {
    format!("trajectories_{id}.csv")
}

pub fn write_city(w: &mut impl Write, city: &City) -> Result<()> {
    let mut header = vec!["location_id".to_string()];
    header.extend((0..city.categories).map(|c| format!("poi_{c}")));
    header.extend(["lat", "lon", "flow"].map(String::from));
    writeln!(w, "{}", header.join(","))?;
    for l in &city.locations {
        let counts: Vec<String> = l.poi_counts.iter().map(u32::to_string).collect();
        writeln!(w, "{},{},{},{},{}", l.id, counts.join(","), l.lat, l.lon, l.flow)?;
    }
    Ok(())
}

pub fn read_city(r: impl Read, source_name: &str, id: usize) -> Result<City> {
    let err = |line: usize, message: String| Error::Parse {
        source_name: source_name.to_string(),
        line,
        message,
    };
    let mut lines = BufReader::new(r).lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => return Err(err(1, "missing header".into())),
    };
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.len() < 5 || cols[0] != "location_id" || cols[cols.len() - 3..] != ["lat", "lon", "flow"] {
        return Err(err(1, format!("unexpected header {header:?}")));
    }
    let categories = cols.len() - 4;
    let mut locations = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != cols.len() {
            return Err(err(lineno, format!("expected {} fields, found {}", cols.len(), fields.len())));
        }
        let int = |s: &str| s.parse::<u32>().map_err(|e| err(lineno, format!("{s:?}: {e}")));
        let real = |s: &str| s.parse::<f64>().map_err(|e| err(lineno, format!("{s:?}: {e}")));
        let flow = real(fields[categories + 3])?;
        if !(flow >= 0.0) {
            return Err(err(lineno, format!("negative flow {flow}")));
        }
        locations.push(Location {
            id: int(fields[0])? as usize,
            poi_counts: fields[1..=categories].iter().map(|s| int(s)).collect::<Result<_>>()?,
            lat: real(fields[categories + 1])?,
            lon: real(fields[categories + 2])?,
            flow,
        });
    }
    City::new(id, categories, locations).map_err(|e| err(0, e.to_string()))
}

pub fn write_trajectories(w: &mut impl Write, trajs: &[Trajectory]) -> Result<()> {
    writeln!(w, "user_id,city_id,steps")?;
    for t in trajs {
        let steps: Vec<String> = t.steps.iter().map(|s| format!("{}:{}", s.location, s.time)).collect();
        writeln!(w, "{},{},{}", t.user_id, t.city_id, steps.join(" "))?;
    }
    Ok(())
}

pub fn read_trajectories(r: impl Read, source_name: &str) -> Result<Vec<Trajectory>> {
    let err = |line: usize, message: String| Error::Parse {
        source_name: source_name.to_string(),
        line,
        message,
    };
    let mut lines = BufReader::new(r).lines();
    let header = lines.next().transpose()?;
    if header.as_deref().map(str::trim) != Some("user_id,city_id,steps") {
        return Err(err(1, "missing or unexpected header".into()));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().splitn(3, ',').collect();
        if fields.len() != 3 {
            return Err(err(lineno, "expected user_id,city_id,steps".into()));
        }
        let user = fields[0].parse::<u64>().map_err(|e| err(lineno, e.to_string()))?;
        let city = fields[1].parse::<usize>().map_err(|e| err(lineno, e.to_string()))?;
        let steps = fields[2]
            .split_whitespace()
            .map(|tok| {
                let (l, t) = tok
                    .split_once(':')
                    .ok_or_else(|| err(lineno, format!("step {tok:?} is not location:time")))?;
                Ok(Step {
                    location: l.parse().map_err(|e| err(lineno, format!("{l:?}: {e}")))?,
                    time: t.parse().map_err(|e| err(lineno, format!("{t:?}: {e}")))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(Trajectory::new(user, city, steps).map_err(|e| err(lineno, e.to_string()))?);
    }
    Ok(out)
}

pub fn save_dataset(dir: &Path, data: &[CityDataset]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for d in data {
        let mut f = fs::File::create(dir.join(city_file_name(d.city.id)))?;
        write_city(&mut f, &d.city)?;
        let mut f = fs::File::create(dir.join(trajectory_file_name(d.city.id)))?;
        write_trajectories(&mut f, &d.trajectories)?;
    }
    Ok(())
}

/// Loads every `city_<id>.csv` in `dir` with its trajectory file, by id.
pub fn load_dataset(dir: &Path) -> Result<Vec<CityDataset>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_prefix("city_").and_then(|s| s.strip_suffix(".csv")) {
            if let Ok(id) = id.parse::<usize>() {
                ids.push(id);
            }
        }
    }
    ids.sort_unstable();
    if ids.is_empty() {
        return Err(Error::Empty(format!("no city files in {}", dir.display())));
    }
    ids.into_iter().map(|id| load_city_dataset(dir, id)).collect()
}

pub fn load_city_dataset(dir: &Path, id: usize) -> Result<CityDataset> {
    let cpath = dir.join(city_file_name(id));
    let tpath = dir.join(trajectory_file_name(id));
    let open = |p: &Path| fs::File::open(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())));
    let city = read_city(open(&cpath)?, &cpath.display().to_string(), id)?;
    let trajectories = read_trajectories(open(&tpath)?, &tpath.display().to_string())?;
    for t in &trajectories {
        if t.city_id != id {
            return Err(Error::invalid(format!("{} holds a trajectory of city {}", tpath.display(), t.city_id)));
        }
        if let Some(s) = t.steps.iter().find(|s| s.location >= city.len()) {
            return Err(Error::UnknownLocation {
                location: s.location,
                city: id,
            });
        }
    }
    Ok(CityDataset { city, trajectories })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traj::tod_slot;
    use std::collections::HashMap;

    fn small(noise: f64) -> GeneratorConfig {
        GeneratorConfig {
            seed: 7,
            cities: 2,
            locations: 12,
            categories: 4,
            users: 20,
            days: 6,
            noise,
            ..Default::default()
        }
    }

    #[test]
    fn gen_city_is_deterministic_and_dense() {
        let cfg = small(0.0);
        let a = gen_city(&cfg, 1).unwrap();
        assert_eq!(a, gen_city(&cfg, 1).unwrap());
        assert_ne!(a.city, gen_city(&cfg, 0).unwrap().city);
        let ids: Vec<usize> = a.city.locations.iter().map(|l| l.id).collect();
        assert_eq!(ids, (0..12).collect::<Vec<_>>());
        assert!(a.city.locations.iter().all(|l| l.flow >= 0.0));
        assert!(gen_city(&GeneratorConfig { locations: 1, ..cfg }, 0).is_err());
    }

    #[test]
    fn ten_locations_fill_every_rank_bucket() {
        let cfg = GeneratorConfig {
            locations: 10,
            ..small(0.0)
        };
        let c = gen_city(&cfg, 0).unwrap();
        for b in 1..=5 {
            assert!(c.city.ranks().contains(&b), "bucket {b} empty");
        }
    }

    #[test]
    fn trajectories_have_increasing_times() {
        let cfg = small(0.5);
        let c = gen_city(&cfg, 0).unwrap();
        let trajs = gen_trajectories(&c, &cfg).unwrap();
        assert_eq!(trajs.len(), 20);
        for t in &trajs {
            assert!(t.steps.windows(2).all(|w| w[0].time < w[1].time));
            assert!(t.steps.iter().all(|s| s.location < 12));
        }
    }

    #[test]
    fn noise_free_two_anchor_schedule_is_determined_by_slot() {
        let cfg = GeneratorConfig {
            anchors: 2,
            ..small(0.0)
        };
        let c = gen_city(&cfg, 0).unwrap();
        let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
        for t in gen_trajectories(&c, &cfg).unwrap() {
            for w in t.steps.windows(2) {
                let half = tod_slot(w[0].time) >= 24;
                let prev = seen.insert((w[0].location, usize::from(half)), w[1].location);
                assert!(prev.is_none_or(|p| p == w[1].location));
            }
        }
    }

    #[test]
    fn full_noise_spreads_over_anchors() {
        let cfg = GeneratorConfig {
            users: 60,
            days: 30,
            ..small(1.0)
        };
        let c = gen_city(&cfg, 0).unwrap();
        let mut counts = [[0usize; 3]; 3];
        for t in gen_trajectories(&c, &cfg).unwrap() {
            for w in t.steps.windows(2) {
                let (_, r0) = c.role_of(w[0].location).unwrap();
                let (_, r1) = c.role_of(w[1].location).unwrap();
                counts[r0][r1] += 1;
            }
        }
        for row in counts {
            let n: usize = row.iter().sum();
            for &k in &row {
                let p = k as f64 / n as f64;
                let se = (1.0 / 3.0 * 2.0 / 3.0 / n as f64).sqrt();
                assert!((p - 1.0 / 3.0).abs() < 4.0 * se, "{row:?}");
            }
        }
    }

    fn raw(times: &[i64]) -> Trajectory {
        Trajectory::new(
            1,
            0,
            times.iter().map(|&t| Step { location: 0, time: t }).collect(),
        )
        .unwrap()
    }

    #[test]
    fn preprocess_window_rules() {
        let day = 86_400;
        let four = raw(&[0, 3600, 7200, 2 * day]);
        assert!(preprocess(&[four], &PreprocessConfig::default()).is_empty());
        let twelve: Vec<i64> = (0..12).map(|i| i * day / 2).collect();
        let out = preprocess(&[raw(&twelve)], &PreprocessConfig::default());
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|t| t.len() == 6));
        let split = preprocess(
            &[raw(&twelve)],
            &PreprocessConfig {
                max_len: Some(5),
                ..Default::default()
            },
        );
        // 6 + 6 become 5+1 and 5+1; the singletons are dropped
        assert_eq!(split.len(), 2);
        let overlapping = preprocess(
            &[raw(&twelve)],
            &PreprocessConfig {
                stride_hours: Some(24),
                ..Default::default()
            },
        );
        assert!(overlapping.len() > 2);
    }

    #[test]
    fn preprocess_random_stream_scan() {
        let cfg = small(0.3);
        let c = gen_city(&cfg, 0).unwrap();
        let trajs = gen_trajectories(&c, &cfg).unwrap();
        let out = preprocess(&trajs, &PreprocessConfig::default());
        assert!(!out.is_empty());
        for t in &out {
            assert!(t.len() >= 5);
            assert!(t.steps.last().unwrap().time - t.steps[0].time <= 72 * 3600);
        }
    }

    #[test]
    fn city_file_round_trip_and_errors() {
        let cfg = small(0.0);
        let c = gen_city(&cfg, 0).unwrap().city;
        let mut buf = Vec::new();
        write_city(&mut buf, &c).unwrap();
        let back = read_city(&buf[..], "mem", 0).unwrap();
        assert_eq!(back, c);
        let truncated = &buf[..buf.len() / 2];
        match read_city(truncated, "mem", 0) {
            Err(Error::Parse { line, .. }) => assert!(line > 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn trajectory_file_round_trip_and_errors() {
        let cfg = small(0.0);
        let c = gen_city(&cfg, 0).unwrap();
        let trajs = gen_trajectories(&c, &cfg).unwrap();
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &trajs).unwrap();
        assert_eq!(read_trajectories(&buf[..], "mem").unwrap(), trajs);
        let bad = "user_id,city_id,steps\n1,0,3:100 4:90\n";
        match read_trajectories(bad.as_bytes(), "mem") {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("expected parse error on line 2, got {other:?}"),
        }
        assert!(read_trajectories("user_id,city_id,steps\n1,0,3-100\n".as_bytes(), "mem").is_err());
    }
}
