//! Synthetic assemble-to-order families, substitution and two-echelon
//! topologies, and ingestion of store-level sales records.
//!
//! Indices are 0-based throughout: product sets passed to
//! [`build_two_echelon`] refer to rows `0..N_x`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datadriven::{derive_seed, Dataset};
use crate::error::{Error, Result};
use crate::model::{AmbiguityInfo, Instance, MomentInfo, ProblemData};

/// `[[I, ν1], [ϑᵀ, ν]]` with `ϑ = (1, …, N−1)`.
pub fn build_parametric_a(n: usize, nu: f64) -> Result<DMatrix<f64>> {
    if n < 2 {
        return Err(Error::domain(format!("parametric structure needs N >= 2, got {n}")));
    }
    let last = n - 1;
    Ok(DMatrix::from_fn(n, n, |i, j| match (i == last, j == last) {
        (_, true) => nu,
        (true, false) => (j + 1) as f64,
        (false, false) => f64::from(u8::from(i == j)),
    }))
}

/// A named component-by-product usage matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    pub id: String,
    #[serde(with = "crate::linalg::serde_matrix")]
    pub a: DMatrix<f64>,
    /// False for the documented stand-ins.
    pub exact: bool,
}

impl Structure {
    pub fn n_products(&self) -> usize {
        self.a.ncols()
    }
}

/// Seed of the random general structure; fixed so the registry is a constant.
const GENERAL_SEED: u64 = 0x5eed_0014;

/// The eight default structures: five labelled stand-ins with 2 to 14
/// products, then the parametric structures for `N ∈ {10, 20, 30}`.
pub fn default_registry() -> Vec<Structure> {
    let stand_in = |id: &str, a: DMatrix<f64>| Structure { id: id.into(), a, exact: false };
    let mut out = vec![
        stand_in("identity-2", DMatrix::identity(2, 2)),
        // Two components, the middle product needs both.
        stand_in("w-3", DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0])),
        // Three components shared along a chain of five products.
        stand_in(
            "m-5",
            DMatrix::from_row_slice(3, 5, &[
                1.0, 1.0, 0.0, 0.0, 0.0, //
                0.0, 1.0, 1.0, 1.0, 0.0, //
                0.0, 0.0, 0.0, 1.0, 1.0,
            ]),
        ),
        // Product j consumes components 0..=j.
        stand_in("serial-8", DMatrix::from_fn(8, 8, |i, j| f64::from(u8::from(i <= j)))),
        stand_in("general-14", random_general(14, GENERAL_SEED)),
    ];
    for n in [10, 20, 30] {
        out.push(Structure { id: format!("parametric-{n}"), a: build_parametric_a(n, 2.0).expect("n >= 2"), exact: true });
    }
    out
}

fn random_general(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(n, n, |i, j| {
        let v = rng.random_range(0..3u8);
        f64::from(if i == j { v.max(1) } else { v })
    })
}

const COSTS: [&[f64]; 2] = [&[1.0], &[1.5, 2.0]];
const MARKUPS: [&[f64]; 4] = [&[1.1], &[3.0], &[2.0, 1.5], &[3.0, 1.1]];
/// `(μ pattern, σ² pattern)`.
const MOMENTS: [(&[f64], &[f64]); 5] = [
    (&[20.0], &[20.0]),
    (&[20.0, 30.0], &[20.0]),
    (&[20.0, 40.0], &[20.0, 40.0]),
    (&[20.0, 40.0], &[20.0, 60.0]),
    (&[20.0, 30.0, 40.0], &[20.0, 40.0, 60.0]),
];
pub const BUDGET_MULTIPLIERS: [f64; 2] = [0.5, 2.0];

/// Repeats `pattern` to length `n`.
pub fn cycle(pattern: &[f64], n: usize) -> DVector<f64> {
    DVector::from_iterator(n, pattern.iter().copied().cycle().take(n))
}

/// One point of the synthetic cross product. Variants are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceDescriptor {
    pub structure_id: String,
    pub cost_variant: u8,
    pub markup_variant: u8,
    pub moment_variant: u8,
    pub budget_multiplier: f64,
}

impl InstanceDescriptor {
    pub fn id(&self) -> String {
        format!(
            "{}-c{}-m{}-t{}-b{}",
            self.structure_id, self.cost_variant, self.markup_variant, self.moment_variant, self.budget_multiplier
        )
    }
}

/// A resolved synthetic instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedInstance {
    pub descriptor: InstanceDescriptor,
    pub problem: ProblemData,
    pub moments: MomentInfo,
}

impl GeneratedInstance {
    pub fn id(&self) -> String {
        self.descriptor.id()
    }

    pub fn to_instance(&self) -> Instance {
        Instance {
            problem: self.problem.clone(),
            ambiguity: AmbiguityInfo::Moment(self.moments.clone()),
            meta: serde_json::json!({ "id": self.id(), "descriptor": self.descriptor }),
        }
    }
}

/// Builds `(c, p, A, b, μ, σ)` for one structure and variant choice.
pub fn resolve(structure: &Structure, d: &InstanceDescriptor) -> Result<GeneratedInstance> {
    let pick = |v: u8, len: usize, what: &str| {
        (1..=len as u8)
            .contains(&v)
            .then_some(v as usize - 1)
            .ok_or_else(|| Error::Config(format!("{what} variant {v} outside 1..={len}")))
    };
    let ci = pick(d.cost_variant, COSTS.len(), "cost")?;
    let mi = pick(d.markup_variant, MARKUPS.len(), "markup")?;
    let ti = pick(d.moment_variant, MOMENTS.len(), "moment")?;
    if !(d.budget_multiplier > 0.0) {
        return Err(Error::Config(format!("budget multiplier {} must be positive", d.budget_multiplier)));
    }
    let a = &structure.a;
    let (n_x, n) = a.shape();
    let c = cycle(COSTS[ci], n_x);
    let gamma = cycle(MARKUPS[mi], n);
    let unit_cost = a.transpose() * &c;
    let p = gamma.component_mul(&unit_cost);
    let mu = cycle(MOMENTS[ti].0, n);
    let sigma = cycle(MOMENTS[ti].1, n).map(f64::sqrt);
    let b = DVector::from_element(1, d.budget_multiplier * unit_cost.dot(&mu));
    let g = DMatrix::from_row_slice(1, n_x, c.as_slice());
    let problem = ProblemData::new(c, g, b, p, a.clone(), DMatrix::identity(n, n))?;
    Ok(GeneratedInstance { descriptor: d.clone(), problem, moments: MomentInfo::new(mu, sigma)? })
}

/// All descriptors in registry order, then cost, markup, moment and budget.
pub fn enumerate_descriptors(registry: &[Structure]) -> Result<Vec<InstanceDescriptor>> {
    if registry.is_empty() {
        return Err(Error::Config("structure registry is empty".into()));
    }
    let mut ids = BTreeSet::new();
    let mut out = Vec::new();
    for s in registry {
        if !ids.insert(&s.id) {
            return Err(Error::Config(format!("duplicate structure id {}", s.id)));
        }
        for cost in 1..=COSTS.len() as u8 {
            for markup in 1..=MARKUPS.len() as u8 {
                for moment in 1..=MOMENTS.len() as u8 {
                    for &bm in &BUDGET_MULTIPLIERS {
                        out.push(InstanceDescriptor {
                            structure_id: s.id.clone(),
                            cost_variant: cost,
                            markup_variant: markup,
                            moment_variant: moment,
                            budget_multiplier: bm,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn enumerate_instance_family(registry: &[Structure]) -> Result<Vec<GeneratedInstance>> {
    let by_id: BTreeMap<&str, &Structure> = registry.iter().map(|s| (s.id.as_str(), s)).collect();
    enumerate_descriptors(registry)?.iter().map(|d| resolve(by_id[d.structure_id.as_str()], d)).collect()
}

/// Block-diagonal rows of ones: demand type `i` can be served by any of its
/// `n_i` substitutable products.
pub fn build_substitution_h(segment_sizes: &[usize]) -> Result<DMatrix<f64>> {
    if segment_sizes.is_empty() {
        return Err(Error::domain("no segments"));
    }
    if segment_sizes.contains(&0) {
        return Err(Error::domain("segment sizes must be at least 1"));
    }
    let n_y: usize = segment_sizes.iter().sum();
    let mut h = DMatrix::zeros(segment_sizes.len(), n_y);
    let mut col = 0;
    for (i, &n) in segment_sizes.iter().enumerate() {
        h.view_mut((i, col), (1, n)).fill(1.0);
        col += n;
    }
    Ok(h)
}

/// Single-warehouse, multi-store system: one column of `A` per store-product
/// pair, pointing at that product's warehouse row, and `H = I`. The budget
/// row is `cᵀx ≤ budget`.
pub fn build_two_echelon(
    product_sets: &[Vec<usize>],
    prices: &DVector<f64>,
    costs: &DVector<f64>,
    budget: f64,
) -> Result<ProblemData> {
    let n_x = costs.len();
    let n_y: usize = product_sets.iter().map(Vec::len).sum();
    if product_sets.iter().any(Vec::is_empty) {
        return Err(Error::domain("every store must offer at least one product"));
    }
    if prices.len() != n_y {
        return Err(Error::shape(format!("{} prices for {n_y} store-product pairs", prices.len())));
    }
    let mut a = DMatrix::zeros(n_x, n_y);
    for (col, &k) in product_sets.iter().flatten().enumerate() {
        if k >= n_x {
            return Err(Error::domain(format!("product index {k} outside 0..{n_x}")));
        }
        a[(k, col)] = 1.0;
    }
    let g = DMatrix::from_row_slice(1, n_x, costs.as_slice());
    ProblemData::new(costs.clone(), g, DVector::from_element(1, budget), prices.clone(), a, DMatrix::identity(n_y, n_y))
}

/// One CSV record.
#[derive(Debug, Clone, Deserialize)]
struct SalesRow {
    store_id: String,
    product_id: String,
    date: String,
    units_sold: f64,
    unit_cost: f64,
    unit_price: f64,
}

/// A store-product pair with complete daily history.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SalesEntry {
    pub store_id: String,
    pub product_id: String,
    pub unit_cost: f64,
    pub unit_price: f64,
}

/// Parsed and filtered sales records before selection.
#[derive(Debug, Clone, PartialEq)]
pub struct SalesTable {
    /// Sorted distinct dates.
    pub dates: Vec<String>,
    /// Consistent entries sorted by `(store_id, product_id)`.
    pub entries: Vec<SalesEntry>,
    /// `units[e][t]`: sales of entry `e` on `dates[t]`.
    units: Vec<Vec<f64>>,
    /// Entries dropped for missing or duplicated days.
    pub dropped: usize,
}

/// Reads a sales CSV with header
/// `store_id,product_id,date,units_sold,unit_cost,unit_price`.
///
/// An entry is kept only if it has exactly one row for every date present
/// in the file. Its cost and price are averages over its rows.
pub fn read_sales_csv(path: impl AsRef<Path>) -> Result<SalesTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<SalesRow>() {
        let row = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            detail: e.to_string(),
        })?;
        let line = rows.len() as u64 + 2;
        for (name, v) in [("units_sold", row.units_sold), ("unit_cost", row.unit_cost), ("unit_price", row.unit_price)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parse { line, detail: format!("{name} = {v} is not a finite nonnegative number") });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data("sales file has no rows".into()));
    }
    let dates: Vec<String> = rows.iter().map(|r| r.date.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let day: BTreeMap<&str, usize> = dates.iter().enumerate().map(|(i, d)| (d.as_str(), i)).collect();

    let mut groups: BTreeMap<(String, String), Vec<&SalesRow>> = BTreeMap::new();
    for r in &rows {
        groups.entry((r.store_id.clone(), r.product_id.clone())).or_default().push(r);
    }
    let mut entries = Vec::new();
    let mut units = Vec::new();
    let mut dropped = 0;
    for ((store_id, product_id), rs) in groups {
        let mut series = vec![None; dates.len()];
        let mut clean = rs.len() == dates.len();
        for r in &rs {
            let t = day[r.date.as_str()];
            clean &= series[t].replace(r.units_sold).is_none();
        }
        if !clean {
            dropped += 1;
            continue;
        }
        let n = rs.len() as f64;
        entries.push(SalesEntry {
            store_id,
            product_id,
            unit_cost: rs.iter().map(|r| r.unit_cost).sum::<f64>() / n,
            unit_price: rs.iter().map(|r| r.unit_price).sum::<f64>() / n,
        });
        units.push(series.into_iter().map(|v| v.expect("all days present")).collect());
    }
    Ok(SalesTable { dates, entries, units, dropped })
}

/// A selected set of entries with its train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct SalesSplit {
    /// Two-echelon problem with budget `cᵀAμ̂_tr`; rescale with
    /// [`ProblemData::with_budget`].
    pub problem: ProblemData,
    /// Selected entries in column order.
    pub entries: Vec<SalesEntry>,
    /// Warehouse products in row order.
    pub products: Vec<String>,
    pub train: Dataset,
    pub test: Dataset,
    pub train_dates: Vec<String>,
    pub test_dates: Vec<String>,
}

/// Seeded selection of `n_select` entries and a split assigning
/// `round(r_test_percent · days / 100)` days to the test set.
pub fn split_sales(table: &SalesTable, n_select: usize, r_test_percent: f64, seed: u64) -> Result<SalesSplit> {
    if n_select == 0 {
        return Err(Error::domain("n_select must be at least 1"));
    }
    if n_select > table.entries.len() {
        return Err(Error::Data(format!(
            "{n_select} entries requested, {} consistent entries available ({} dropped)",
            table.entries.len(),
            table.dropped
        )));
    }
    if !(0.0..=100.0).contains(&r_test_percent) {
        return Err(Error::domain(format!("test share {r_test_percent}% outside [0, 100]")));
    }
    let n_days = table.dates.len();
    let n_test = (r_test_percent * n_days as f64 / 100.0).round() as usize;
    if n_test == 0 || n_test == n_days {
        return Err(Error::Data(format!("splitting {n_days} days at {r_test_percent}% leaves an empty side")));
    }

    let mut pick: Vec<usize> = (0..table.entries.len()).collect();
    pick.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &["select"])));
    pick.truncate(n_select);
    pick.sort_unstable();

    let mut days: Vec<usize> = (0..n_days).collect();
    days.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &["split"])));
    let (mut test_days, mut train_days) = (days[..n_test].to_vec(), days[n_test..].to_vec());
    test_days.sort_unstable();
    train_days.sort_unstable();

    let entries: Vec<SalesEntry> = pick.iter().map(|&e| table.entries[e].clone()).collect();
    let products: Vec<String> = entries.iter().map(|e| e.product_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let row_of: BTreeMap<&str, usize> = products.iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect();

    // Entries are sorted by store, so stores form contiguous column blocks.
    let mut sets: Vec<Vec<usize>> = Vec::new();
    let mut last_store: Option<&str> = None;
    for e in &entries {
        if last_store != Some(e.store_id.as_str()) {
            sets.push(Vec::new());
            last_store = Some(e.store_id.as_str());
        }
        sets.last_mut().expect("pushed above").push(row_of[e.product_id.as_str()]);
    }
    let costs = DVector::from_fn(products.len(), |k, _| {
        let of: Vec<f64> = entries.iter().filter(|e| row_of[e.product_id.as_str()] == k).map(|e| e.unit_cost).collect();
        of.iter().sum::<f64>() / of.len() as f64
    });
    let prices = DVector::from_iterator(entries.len(), entries.iter().map(|e| e.unit_price));

    let data = |ds: &[usize], label: &str| {
        let m = DMatrix::from_fn(ds.len(), pick.len(), |r, c| table.units[pick[c]][ds[r]]);
        let mut d = Dataset::new(m, format!("sales {label}"))?;
        d.seed = Some(seed);
        Ok::<_, Error>(d)
    };
    let train = data(&train_days, "train")?;
    let test = data(&test_days, "test")?;
    let mu_tr = crate::datadriven::empirical_moments(&train).mu;
    let mut problem = build_two_echelon(&sets, &prices, &costs, 0.0)?;
    let unit_budget = (problem.a().transpose() * problem.c()).dot(&mu_tr);
    problem = problem.with_budget(DVector::from_element(1, unit_budget))?;

    let names = |ds: &[usize]| ds.iter().map(|&t| table.dates[t].clone()).collect();
    Ok(SalesSplit {
        problem,
        entries,
        products,
        train,
        test,
        train_dates: names(&train_days),
        test_dates: names(&test_days),
    })
}

/// [`read_sales_csv`] followed by [`split_sales`].
pub fn ingest_sales_csv(path: impl AsRef<Path>, n_select: usize, r_test_percent: f64, seed: u64) -> Result<SalesSplit> {
    split_sales(&read_sales_csv(path)?, n_select, r_test_percent, seed)
}
