use std::fmt;
use std::io::BufRead;

use rayon::prelude::*;
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{LabError, PerturbedPair, SimilarityProvider};
use crate::backend::{cached, CachedBackend, ModelBackend, DEFAULT_CACHE_CAPACITY};
use crate::distribution::CidParams;
use crate::engine::{contrast_pair_uncached, DecodeLimits};

pub const DEFAULT_GRID: [f64; 8] = [0.0, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0];
pub const DEFAULT_TAU: f64 = 0.85;

/// Ascending contrast strengths, starting at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LambdaGrid(Vec<f64>);

impl LambdaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self, LabError> {
        validate_grid(&values)?;
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl Default for LambdaGrid {
    fn default() -> Self {
        Self(DEFAULT_GRID.to_vec())
    }
}

impl TryFrom<Vec<f64>> for LambdaGrid {
    type Error = LabError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<LambdaGrid> for Vec<f64> {
    fn from(grid: LambdaGrid) -> Self {
        grid.0
    }
}

fn validate_grid(values: &[f64]) -> Result<(), LabError> {
    match values.first() {
        None => return Err(LabError::InvalidGrid("grid is empty".into())),
        Some(&first) if first != 0.0 => {
            return Err(LabError::InvalidGrid(format!("grid must start at 0, starts at {first}")))
        }
        _ => {}
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(LabError::InvalidGrid("grid values must be finite".into()));
    }
    if let Some(w) = values.windows(2).find(|w| w[1] <= w[0]) {
        return Err(LabError::InvalidGrid(format!("grid is not strictly increasing at {} -> {}", w[0], w[1])));
    }
    Ok(())
}

/// Outcome of the threshold scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaStar {
    Reached(f64),
    NotReached,
}

impl LambdaStar {
    pub fn value(self) -> Option<f64> {
        match self {
            LambdaStar::Reached(v) => Some(v),
            LambdaStar::NotReached => None,
        }
    }
}

impl fmt::Display for LambdaStar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaStar::Reached(v) => write!(f, "{v}"),
            LambdaStar::NotReached => f.write_str("NOT_REACHED"),
        }
    }
}

const NOT_REACHED: &str = "NOT_REACHED";

impl Serialize for LambdaStar {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            LambdaStar::Reached(v) => serializer.serialize_f64(*v),
            LambdaStar::NotReached => serializer.serialize_str(NOT_REACHED),
        }
    }
}

impl<'de> Deserialize<'de> for LambdaStar {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct StarVisitor;

        impl Visitor<'_> for StarVisitor {
            type Value = LambdaStar;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "a number or \"{NOT_REACHED}\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<LambdaStar, E> {
                Ok(LambdaStar::Reached(v))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<LambdaStar, E> {
                Ok(LambdaStar::Reached(v as f64))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<LambdaStar, E> {
                Ok(LambdaStar::Reached(v as f64))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<LambdaStar, E> {
                if v == NOT_REACHED {
                    Ok(LambdaStar::NotReached)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }

        deserializer.deserialize_any(StarVisitor)
    }
}

/// The two directions' continuations at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationPair {
    pub forward: String,
    pub reverse: String,
}

/// A λ sweep for one pair and, once [`lambda_star`] has run, its threshold
/// crossing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaStarResult {
    pub pair: PerturbedPair,
    pub grid: Vec<f64>,
    pub sims: Vec<f64>,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub lambda_star: Option<LambdaStar>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub continuations: Vec<ContinuationPair>,
}

/// Which text precedes the reverse-direction continuation when scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefixMode {
    /// `sim(x + CID(x; x'), x + CID(x'; x))`.
    #[default]
    Original,
    /// `sim(x + CID(x; x'), x' + CID(x'; x))`.
    Own,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    pub top_k: usize,
    pub limits: DecodeLimits,
    pub prefix: PrefixMode,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { top_k: CidParams::DEFAULT_TOP_K, limits: DecodeLimits::default(), prefix: PrefixMode::Original }
    }
}

/// Decodes both directions at every grid point and records the similarity
/// of the prefixed continuations. `lambda_star` is left unset.
pub fn lambda_sweep<B, P>(
    pair: &PerturbedPair,
    grid: &LambdaGrid,
    backend: &B,
    provider: &P,
    options: SweepOptions,
) -> Result<LambdaStarResult, LabError>
where
    B: ModelBackend + ?Sized,
    P: SimilarityProvider + ?Sized,
{
    let shared = cached(backend, DEFAULT_CACHE_CAPACITY);
    sweep_shared(pair, grid, &shared, provider, options)
}

fn sweep_shared<B, P>(
    pair: &PerturbedPair,
    grid: &LambdaGrid,
    backend: &CachedBackend<&B>,
    provider: &P,
    options: SweepOptions,
) -> Result<LambdaStarResult, LabError>
where
    B: ModelBackend + ?Sized,
    P: SimilarityProvider + ?Sized,
{
    let mut sims = Vec::with_capacity(grid.values().len());
    let mut continuations = Vec::with_capacity(grid.values().len());
    for &lambda in grid.values() {
        let params = CidParams { lambda, top_k: options.top_k };
        let (forward, reverse) =
            contrast_pair_uncached(backend, &pair.original, &pair.perturbed, params, options.limits)
                .map_err(|source| LabError::Decode { lambda, source })?;
        let reverse_prefix = match options.prefix {
            PrefixMode::Original => &pair.original,
            PrefixMode::Own => &pair.perturbed,
        };
        let a = format!("{}{}", pair.original, forward.generated_text);
        let b = format!("{}{}", reverse_prefix, reverse.generated_text);
        let sim = provider.similarity(&a, &b).map_err(|source| LabError::Similarity { lambda, source })?;
        sims.push(sim);
        continuations.push(ContinuationPair { forward: forward.generated_text, reverse: reverse.generated_text });
    }
    Ok(LambdaStarResult {
        pair: pair.clone(),
        grid: grid.values().to_vec(),
        sims,
        tau: None,
        lambda_star: None,
        continuations,
    })
}

/// Sets `lambda_star` to the first grid value whose similarity is below
/// `tau`, or [`LambdaStar::NotReached`].
pub fn lambda_star(mut sweep: LambdaStarResult, tau: f64) -> Result<LambdaStarResult, LabError> {
    if !tau.is_finite() {
        return Err(LabError::InvalidTau(tau));
    }
    validate_grid(&sweep.grid)?;
    if sweep.sims.len() != sweep.grid.len() {
        return Err(LabError::SimsLength { sims: sweep.sims.len(), grid: sweep.grid.len() });
    }
    let crossing = sweep.grid.iter().zip(&sweep.sims).find(|(_, &sim)| sim < tau).map(|(&l, _)| l);
    sweep.tau = Some(tau);
    sweep.lambda_star = Some(crossing.map_or(LambdaStar::NotReached, LambdaStar::Reached));
    Ok(sweep)
}

/// Sweeps every pair (in parallel, through one shared cache) and applies
/// the threshold scan. Results keep the input order; each failure is
/// reported with its pair index.
pub fn sweep_pairs<B, P>(
    pairs: &[PerturbedPair],
    grid: &LambdaGrid,
    tau: f64,
    backend: &B,
    provider: &P,
    options: SweepOptions,
) -> Vec<Result<LambdaStarResult, LabError>>
where
    B: ModelBackend + ?Sized,
    P: SimilarityProvider + ?Sized,
{
    let shared = cached(backend, DEFAULT_CACHE_CAPACITY);
    pairs
        .par_iter()
        .enumerate()
        .map(|(index, pair)| {
            sweep_shared(pair, grid, &shared, provider, options)
                .and_then(|sweep| lambda_star(sweep, tau))
                .map_err(|e| LabError::Pair { index, source: Box::new(e) })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub lambda: f64,
    pub mean_similarity: f64,
}

/// Mean similarity at each grid point across `pairs`.
pub fn mean_similarity_curve<B, P>(
    pairs: &[PerturbedPair],
    grid: &LambdaGrid,
    backend: &B,
    provider: &P,
    options: SweepOptions,
) -> Result<Vec<CurvePoint>, LabError>
where
    B: ModelBackend + ?Sized,
    P: SimilarityProvider + ?Sized,
{
    if pairs.is_empty() {
        return Err(LabError::NoPairs);
    }
    let shared = cached(backend, DEFAULT_CACHE_CAPACITY);
    let sweeps: Vec<LambdaStarResult> = pairs
        .par_iter()
        .enumerate()
        .map(|(index, pair)| {
            sweep_shared(pair, grid, &shared, provider, options)
                .map_err(|e| LabError::Pair { index, source: Box::new(e) })
        })
        .collect::<Result<_, _>>()?;
    mean_curve_from_results(&sweeps)
}

/// Averages already-computed sweeps; all must share one grid.
pub fn mean_curve_from_results(results: &[LambdaStarResult]) -> Result<Vec<CurvePoint>, LabError> {
    let first = results.first().ok_or(LabError::NoPairs)?;
    let grid = &first.grid;
    let mut totals = vec![0.0; grid.len()];
    for (index, r) in results.iter().enumerate() {
        if &r.grid != grid {
            return Err(LabError::Pair {
                index,
                source: Box::new(LabError::InvalidGrid("sweeps use different grids".into())),
            });
        }
        if r.sims.len() != grid.len() {
            return Err(LabError::SimsLength { sims: r.sims.len(), grid: grid.len() });
        }
        for (t, s) in totals.iter_mut().zip(&r.sims) {
            *t += s;
        }
    }
    let n = results.len() as f64;
    Ok(grid.iter().zip(totals).map(|(&lambda, t)| CurvePoint { lambda, mean_similarity: t / n }).collect())
}

/// Reads a JSON-lines pairs file; blank lines are skipped.
pub fn read_pairs_jsonl<R: BufRead>(reader: R) -> Result<Vec<PerturbedPair>, LabError> {
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| LabError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair = serde_json::from_str(&line).map_err(|e| LabError::Format(format!("line {}: {e}", i + 1)))?;
        pairs.push(pair);
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturbation_lab::{PerturbationType, TokenOverlap};

    fn record(grid: &[f64], sims: &[f64]) -> LambdaStarResult {
        LambdaStarResult {
            pair: PerturbedPair::new("a", "b", PerturbationType::Typo).unwrap(),
            grid: grid.to_vec(),
            sims: sims.to_vec(),
            tau: None,
            lambda_star: None,
            continuations: vec![],
        }
    }

    #[test]
    fn grid_validation() {
        assert!(LambdaGrid::new(vec![]).is_err());
        assert!(LambdaGrid::new(vec![1.0, 2.0]).is_err());
        assert!(LambdaGrid::new(vec![0.0, 2.0, 2.0]).is_err());
        assert!(LambdaGrid::new(vec![0.0, f64::INFINITY]).is_err());
        assert_eq!(LambdaGrid::default().values(), &DEFAULT_GRID);
        assert!(serde_json::from_str::<LambdaGrid>("[0, 5, 1]").is_err());
    }

    #[test]
    fn lambda_star_examples() {
        let r = lambda_star(record(&[0.0, 10.0, 50.0], &[0.95, 0.90, 0.80]), 0.85).unwrap();
        assert_eq!(r.lambda_star, Some(LambdaStar::Reached(50.0)));
        let r = lambda_star(record(&[0.0, 10.0, 50.0], &[0.70, 0.90, 0.80]), 0.85).unwrap();
        assert_eq!(r.lambda_star, Some(LambdaStar::Reached(0.0)));
        let r = lambda_star(record(&[0.0, 10.0], &[0.90, 0.85]), 0.85).unwrap();
        assert_eq!(r.lambda_star, Some(LambdaStar::NotReached));
        assert_eq!(r.tau, Some(0.85));
    }

    #[test]
    fn lambda_star_errors() {
        assert!(matches!(lambda_star(record(&[], &[]), 0.85), Err(LabError::InvalidGrid(_))));
        assert!(matches!(lambda_star(record(&[0.0, 1.0], &[1.0]), 0.85), Err(LabError::SimsLength { .. })));
        assert!(matches!(lambda_star(record(&[0.0], &[1.0]), f64::NAN), Err(LabError::InvalidTau(_))));
    }

    #[test]
    fn lambda_star_serialization() {
        let reached = serde_json::to_string(&LambdaStar::Reached(10.0)).unwrap();
        assert_eq!(reached, "10.0");
        assert_eq!(serde_json::to_string(&LambdaStar::NotReached).unwrap(), "\"NOT_REACHED\"");
        assert_eq!(serde_json::from_str::<LambdaStar>("5").unwrap(), LambdaStar::Reached(5.0));
        assert_eq!(serde_json::from_str::<LambdaStar>("\"NOT_REACHED\"").unwrap(), LambdaStar::NotReached);
        assert!(serde_json::from_str::<LambdaStar>("\"later\"").is_err());
    }

    #[test]
    fn identical_inputs_give_unit_similarity() {
        let m = crate::backend::TableModel::ascii(2).unwrap();
        let pair = PerturbedPair {
            original: "hello".into(),
            perturbed: "hello".into(),
            kind: PerturbationType::Other("identity".into()),
        };
        let options = SweepOptions { limits: DecodeLimits::new(4), ..Default::default() };
        let r = lambda_sweep(&pair, &LambdaGrid::default(), &m, &TokenOverlap, options).unwrap();
        assert!(r.sims.iter().all(|s| (s - 1.0).abs() < 1e-6));
        let curve = mean_similarity_curve(&[pair], &LambdaGrid::default(), &m, &TokenOverlap, options).unwrap();
        assert!(curve.iter().all(|p| (p.mean_similarity - 1.0).abs() < 1e-6));
    }

    #[test]
    fn mean_curve_checks_grids() {
        let a = record(&[0.0, 1.0], &[1.0, 0.5]);
        let b = record(&[0.0, 2.0], &[1.0, 0.5]);
        assert!(mean_curve_from_results(&[a.clone(), b]).is_err());
        assert!(mean_curve_from_results(&[]).is_err());
        let c = record(&[0.0, 1.0], &[0.5, 0.25]);
        let curve = mean_curve_from_results(&[a, c]).unwrap();
        assert_eq!(curve[0].mean_similarity, 0.75);
        assert_eq!(curve[1].mean_similarity, 0.375);
    }

    #[test]
    fn pairs_file_parsing() {
        let text = "{\"original\": \"a b\", \"perturbed\": \"a c\", \"type\": \"synonym\"}\n\n";
        assert_eq!(read_pairs_jsonl(text.as_bytes()).unwrap().len(), 1);
        assert!(read_pairs_jsonl("{bad".as_bytes()).is_err());
    }
}
