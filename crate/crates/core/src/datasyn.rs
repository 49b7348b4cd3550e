//! Synthetic worlds: a random phylogeny, sequences evolved along it, and
//! multi-view feature samples whose geometry follows the tree.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gendist::DistanceMatrix;
use crate::phylo::{Edge, PhyloTree, Precision};
use crate::rng::SeedRng;
use crate::seqio::{write_fasta, AlignedSet};

const BASES: [u8; 4] = [b'A', b'C', b'G', b'T'];

/// Yule pure-birth tree on `S1..Sn`, unrooted (the degree-2 root is
/// suppressed), branch lengths exponential with mean `scale`.
///
/// Leaves are nodes `0..n` in label order; internal nodes follow.
pub fn gen_phylogeny(n_species: usize, seed: u64, scale: f64) -> Result<PhyloTree> {
    if n_species < 2 {
        return Err(Error::InvalidParam(
            "a phylogeny needs at least 2 species".into(),
        ));
    }
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(Error::InvalidParam(format!("branch scale {scale}")));
    }
    let mut rng = SeedRng::new(seed);
    // node 0 is the root; parent[v] for every other node
    let mut parent: Vec<usize> = vec![usize::MAX, 0, 0];
    let mut active = vec![1, 2];
    while active.len() < n_species {
        let k = rng.index(active.len());
        let v = active[k];
        let a = parent.len();
        parent.push(v);
        parent.push(v);
        active[k] = a;
        active.insert(k + 1, a + 1);
    }
    let lengths: Vec<f64> = (0..parent.len())
        .map(|v| if v == 0 { 0.0 } else { rng.exponential(scale) })
        .collect();

    let mut new_id = vec![usize::MAX; parent.len()];
    for (i, &v) in active.iter().enumerate() {
        new_id[v] = i;
    }
    let mut next = n_species;
    for v in 1..parent.len() {
        if new_id[v] == usize::MAX {
            new_id[v] = next;
            next += 1;
        }
    }
    let mut edges = Vec::with_capacity(next - 1);
    let root_children: Vec<usize> = (1..parent.len()).filter(|&v| parent[v] == 0).collect();
    edges.push(Edge {
        a: new_id[root_children[0]],
        b: new_id[root_children[1]],
        length: lengths[root_children[0]] + lengths[root_children[1]],
    });
    for v in 1..parent.len() {
        if parent[v] != 0 {
            edges.push(Edge {
                a: new_id[parent[v]],
                b: new_id[v],
                length: lengths[v],
            });
        }
    }
    let mut labels: Vec<Option<String>> = (1..=n_species).map(|i| Some(format!("S{i}"))).collect();
    labels.resize(next, None);
    PhyloTree::from_parts(labels, edges)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "UPPERCASE")]
pub enum SubstModel {
    Jc,
    /// Transition/transversion rate ratio `kappa`.
    K2p {
        kappa: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvolveParams {
    pub length: usize,
    pub model: SubstModel,
    /// 1-based inclusive span evolving at `conserved_rate` relative to the rest.
    pub conserved: (usize, usize),
    pub conserved_rate: f64,
}

impl Default for EvolveParams {
    fn default() -> Self {
        EvolveParams {
            length: 157,
            model: SubstModel::Jc,
            conserved: (9, 124),
            conserved_rate: 0.1,
        }
    }
}

impl EvolveParams {
    /// Per-site rate multipliers, normalized to mean 1 so branch lengths stay
    /// in expected substitutions per site.
    pub fn site_rates(&self) -> Vec<f64> {
        let (lo, hi) = self.conserved;
        let raw: Vec<f64> = (1..=self.length)
            .map(|p| {
                if p >= lo && p <= hi {
                    self.conserved_rate
                } else {
                    1.0
                }
            })
            .collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        raw.iter().map(|r| r / mean).collect()
    }

    fn validate(&self) -> Result<()> {
        let ok = self.length > 0
            && self.conserved_rate > 0.0
            && self.conserved_rate.is_finite()
            && match self.model {
                SubstModel::Jc => true,
                SubstModel::K2p { kappa } => kappa > 0.0 && kappa.is_finite(),
            };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParam(format!(
                "evolution parameters {self:?}"
            )))
        }
    }
}

fn substitute(base: u8, model: SubstModel, rng: &mut SeedRng) -> u8 {
    let i = BASES.iter().position(|&b| b == base).unwrap_or(0);
    match model {
        SubstModel::Jc => BASES[(i + 1 + rng.index(3)) % 4],
        SubstModel::K2p { kappa } => {
            // A<->G and C<->T are transitions: partner index is i ^ 2
            if rng.uniform() < kappa / (kappa + 2.0) {
                BASES[i ^ 2]
            } else {
                BASES[(i ^ 1) ^ (rng.index(2) << 1)]
            }
        }
    }
}

/// Evolves a uniformly random root sequence along every edge; each site
/// receives a Poisson number of substitution events with mean
/// `branch length * site rate`.
pub fn evolve_sequences(tree: &PhyloTree, params: &EvolveParams, seed: u64) -> Result<AlignedSet> {
    params.validate()?;
    let mut rng = SeedRng::new(seed);
    let rates = params.site_rates();
    let n = tree.node_count();
    let adj = tree.adjacency();
    let root = n - 1;
    let mut seqs: Vec<Option<Vec<u8>>> = vec![None; n];
    seqs[root] = Some((0..params.length).map(|_| BASES[rng.index(4)]).collect());
    let mut stack = vec![root];
    while let Some(v) = stack.pop() {
        for &(w, len) in &adj[v] {
            if seqs[w].is_some() {
                continue;
            }
            let mut s = seqs[v].clone().expect("parent visited first");
            for (site, base) in s.iter_mut().enumerate() {
                for _ in 0..rng.poisson(len * rates[site]) {
                    *base = substitute(*base, params.model, &mut rng);
                }
            }
            seqs[w] = Some(s);
            stack.push(w);
        }
    }
    let records = tree.leaves().into_iter().map(|v| {
        (
            tree.label(v).unwrap_or_default().to_string(),
            String::from_utf8(seqs[v].take().unwrap_or_default()).expect("ascii bases"),
        )
    });
    AlignedSet::new(records)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ViewMode {
    /// Prototype coordinates dealt round-robin across the views, so no
    /// single view carries the whole geometry.
    #[default]
    Complementary,
    /// Every view sees every coordinate.
    Full,
}

pub const N_VIEWS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureParams {
    pub dim: usize,
    pub sigma: f64,
    pub samples_per_species: usize,
    /// Prototypes are scaled to this mean pairwise Euclidean distance.
    pub spread: f64,
    pub views: ViewMode,
}

impl Default for FeatureParams {
    fn default() -> Self {
        FeatureParams {
            dim: 32,
            sigma: 0.1,
            samples_per_species: 30,
            spread: 4.0,
            views: ViewMode::Complementary,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub label: String,
    pub views: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub dim: usize,
    pub species: Vec<String>,
    /// `[view][species]` noise-free feature vectors.
    pub prototypes: Vec<Vec<Vec<f64>>>,
    pub samples: Vec<Sample>,
}

/// Classical multidimensional scaling; coordinates for every positive
/// eigenvalue, largest first, each axis signed so its largest-magnitude
/// entry is positive.
pub fn classical_mds(dm: &DistanceMatrix) -> Vec<Vec<f64>> {
    let n = dm.len();
    let d2 = DMatrix::from_fn(n, n, |i, j| dm.get(i, j).powi(2));
    let row_means: Vec<f64> = (0..n).map(|i| d2.row(i).sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    let b = DMatrix::from_fn(n, n, |i, j| {
        -0.5 * (d2[(i, j)] - row_means[i] - row_means[j] + grand)
    });
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let mut coords = vec![Vec::new(); n];
    for &k in &order {
        let lambda = eig.eigenvalues[k];
        if lambda <= 1e-10 * top {
            break;
        }
        let v = eig.eigenvectors.column(k);
        let pivot = (0..n)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))
            .unwrap_or(0);
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            coords[i].push(sign * v[i] * lambda.sqrt());
        }
    }
    coords
}

fn random_orthonormal(rows: usize, cols: usize, rng: &mut SeedRng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(rows, cols, |_, _| rng.normal());
    g.qr().q()
}

/// Multi-view samples for every species in `dm`.
///
/// Prototypes come from [`classical_mds`] of `dm`, scaled to `spread`; view
/// `v` maps its share of the coordinates into `dim` dimensions through a fixed
/// random orthonormal map and adds isotropic noise of SD `sigma`.
pub fn gen_features(dm: &DistanceMatrix, params: &FeatureParams, seed: u64) -> Result<FeatureSet> {
    if params.dim < 2
        || !(params.sigma >= 0.0)
        || !(params.spread > 0.0)
        || params.samples_per_species == 0
    {
        return Err(Error::InvalidParam(format!(
            "feature parameters {params:?}"
        )));
    }
    let n = dm.len();
    let mut coords = classical_mds(dm);
    let width = coords.first().map_or(0, Vec::len);
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in 0..i {
            total += euclid(&coords[i], &coords[j]);
            pairs += 1;
        }
    }
    let mean = if pairs > 0 { total / pairs as f64 } else { 0.0 };
    let s = if mean > 0.0 {
        params.spread / mean
    } else {
        1.0
    };
    for c in &mut coords {
        c.iter_mut().for_each(|v| *v *= s);
    }

    let mut prototypes = vec![vec![vec![0.0; params.dim]; n]; N_VIEWS];
    for (view, protos) in prototypes.iter_mut().enumerate() {
        let axes: Vec<usize> = match params.views {
            ViewMode::Full => (0..width).collect(),
            ViewMode::Complementary => (view..width).step_by(N_VIEWS).collect(),
        };
        let axes = &axes[..axes.len().min(params.dim)];
        if axes.is_empty() {
            continue;
        }
        let mut rng = SeedRng::stream(seed, view as u64);
        let q = random_orthonormal(params.dim, axes.len(), &mut rng);
        for (i, proto) in protos.iter_mut().enumerate() {
            for (k, &a) in axes.iter().enumerate() {
                for (r, p) in proto.iter_mut().enumerate() {
                    *p += q[(r, k)] * coords[i][a];
                }
            }
        }
    }

    let mut rng = SeedRng::stream(seed, N_VIEWS as u64);
    let mut samples = Vec::with_capacity(n * params.samples_per_species);
    for (i, label) in dm.labels().iter().enumerate() {
        for _ in 0..params.samples_per_species {
            let views = (0..N_VIEWS)
                .map(|v| {
                    prototypes[v][i]
                        .iter()
                        .map(|p| p + params.sigma * rng.normal())
                        .collect()
                })
                .collect();
            samples.push(Sample {
                label: label.clone(),
                views,
            });
        }
    }
    Ok(FeatureSet {
        dim: params.dim,
        species: dm.labels().to_vec(),
        prototypes,
        samples,
    })
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_species: usize,
    pub tree_scale: f64,
    pub evolve: EvolveParams,
    pub features: FeatureParams,
    pub n_holdout: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_species: 12,
            tree_scale: 0.1,
            evolve: EvolveParams::default(),
            features: FeatureParams::default(),
            n_holdout: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub tree: PhyloTree,
    pub sequences: AlignedSet,
    /// Patristic distances of `tree`.
    pub true_dm: DistanceMatrix,
    pub features: FeatureSet,
    /// Species withheld from training, in label order.
    pub holdout: Vec<String>,
}

impl SyntheticWorld {
    pub fn seen_species(&self) -> Vec<String> {
        self.true_dm
            .labels()
            .iter()
            .filter(|l| !self.holdout.contains(l))
            .cloned()
            .collect()
    }
}

pub fn gen_world(config: &WorldConfig) -> Result<SyntheticWorld> {
    if config.n_holdout >= config.n_species {
        return Err(Error::InvalidParam(
            "holdout must leave at least one seen species".into(),
        ));
    }
    let tree = gen_phylogeny(
        config.n_species,
        SeedRng::stream(config.seed, 1).next_u64(),
        config.tree_scale,
    )?;
    let sequences = evolve_sequences(
        &tree,
        &config.evolve,
        SeedRng::stream(config.seed, 2).next_u64(),
    )?;
    let true_dm = tree.patristic_matrix()?;
    let features = gen_features(
        &true_dm,
        &config.features,
        SeedRng::stream(config.seed, 3).next_u64(),
    )?;
    let mut labels = true_dm.labels().to_vec();
    SeedRng::stream(config.seed, 4).shuffle(&mut labels);
    let mut holdout: Vec<String> = labels.into_iter().take(config.n_holdout).collect();
    holdout.sort_by_key(|l| true_dm.index_of(l));
    Ok(SyntheticWorld {
        config: config.clone(),
        tree,
        sequences,
        true_dm,
        features,
        holdout,
    })
}

/// Sample indices for training, testing (seen species) and unseen species.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub unseen: Vec<usize>,
}

/// Stratified split: per seen species, `test_fraction` of its samples
/// (rounded, at least one) go to test. Holdout species go to `unseen`.
pub fn split_samples(
    fs: &FeatureSet,
    holdout: &[String],
    test_fraction: f64,
    seed: u64,
) -> Result<Split> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidParam(format!(
            "test fraction {test_fraction}"
        )));
    }
    let mut rng = SeedRng::new(seed);
    let mut split = Split {
        train: Vec::new(),
        test: Vec::new(),
        unseen: Vec::new(),
    };
    for species in &fs.species {
        let mut idx: Vec<usize> = (0..fs.samples.len())
            .filter(|&i| &fs.samples[i].label == species)
            .collect();
        if holdout.contains(species) {
            split.unseen.extend(idx);
            continue;
        }
        rng.shuffle(&mut idx);
        let k = if test_fraction > 0.0 {
            ((idx.len() as f64 * test_fraction).round() as usize)
                .clamp(1, idx.len().saturating_sub(1))
        } else {
            0
        };
        let (test, train) = idx.split_at(k);
        split.test.extend_from_slice(test);
        split.train.extend_from_slice(train);
    }
    split.train.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

pub fn write_features_csv<W: Write>(fs: &FeatureSet, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec![
        "sample".to_string(),
        "label".to_string(),
        "view".to_string(),
    ];
    header.extend((0..fs.dim).map(|k| format!("f{k}")));
    wr.write_record(&header)?;
    for (i, s) in fs.samples.iter().enumerate() {
        for (v, x) in s.views.iter().enumerate() {
            let mut rec = vec![i.to_string(), s.label.clone(), v.to_string()];
            rec.extend(x.iter().map(|x| format!("{x}")));
            wr.write_record(&rec)?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// Reads samples written by [`write_features_csv`]; prototypes are not
/// stored and come back empty.
pub fn read_features_csv<R: Read>(r: R) -> Result<FeatureSet> {
    let mut rd = csv::Reader::from_reader(r);
    let dim = rd.headers()?.len().saturating_sub(3);
    let mut samples: Vec<Sample> = Vec::new();
    let mut species: Vec<String> = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let bad = |m: &str| {
            Error::Data(format!(
                "feature row {:?}: {m}",
                rec.position().map(|p| p.line())
            ))
        };
        let sample: usize = rec
            .get(0)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("bad sample id"))?;
        let label = rec.get(1).ok_or_else(|| bad("missing label"))?.to_string();
        let view: usize = rec
            .get(2)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("bad view id"))?;
        let x: Vec<f64> = rec
            .iter()
            .skip(3)
            .map(|v| v.parse().map_err(|_| bad("bad value")))
            .collect::<Result<_>>()?;
        if x.len() != dim || view >= N_VIEWS {
            return Err(bad("wrong width or view"));
        }
        if sample == samples.len() {
            samples.push(Sample {
                label: label.clone(),
                views: Vec::with_capacity(N_VIEWS),
            });
        }
        let s = samples
            .get_mut(sample)
            .ok_or_else(|| bad("samples out of order"))?;
        if s.label != label || s.views.len() != view {
            return Err(bad("views out of order"));
        }
        s.views.push(x);
        if !species.contains(&label) {
            species.push(label);
        }
    }
    if samples.iter().any(|s| s.views.len() != N_VIEWS) {
        return Err(Error::Data("sample with missing views".into()));
    }
    Ok(FeatureSet {
        dim,
        species,
        prototypes: Vec::new(),
        samples,
    })
}

/// Writes `tree.nwk`, `sequences.fasta`, `true_dm.csv`, `features.csv` and
/// `world.json` (config and holdout list) into `dir`.
pub fn write_world(world: &SyntheticWorld, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, bytes)?;
        out.push(p);
        Ok(())
    };
    put(
        "tree.nwk",
        format!("{}\n", world.tree.to_newick(Precision::Full)).into_bytes(),
    )?;
    put(
        "sequences.fasta",
        write_fasta(&world.sequences).into_bytes(),
    )?;
    let mut buf = Vec::new();
    world.true_dm.write_csv(&mut buf)?;
    put("true_dm.csv", buf)?;
    let mut buf = Vec::new();
    write_features_csv(&world.features, &mut buf)?;
    put("features.csv", buf)?;
    let meta = serde_json::json!({ "config": world.config, "holdout": world.holdout });
    put("world.json", serde_json::to_vec_pretty(&meta)?)?;
    Ok(out)
}
