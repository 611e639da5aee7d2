//! Learned rescaling vectors for attention keys, attention values and FFN
//! inner activations, one set per layer block.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{DecodeSegment, Model, ModelSpec, Site};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Closed-form adapter size: `L_enc·(d_k + d_v + d_ff) + L_dec·(2d_k + 2d_v + d_ff)`.
pub fn ia3_param_count(spec: &ModelSpec) -> usize {
    spec.enc_layers * (spec.d_k + spec.d_v + spec.d_ff) + spec.dec_layers * (2 * spec.d_k + 2 * spec.d_v + spec.d_ff)
}

/// Names and lengths of every adapter vector for `spec`.
pub fn adapter_shapes(spec: &ModelSpec) -> Vec<(String, usize)> {
    let mut out = Vec::with_capacity(3 * spec.enc_layers + 5 * spec.dec_layers);
    for i in 0..spec.enc_layers {
        out.push((format!("enc.{i}.l_k"), spec.d_k));
        out.push((format!("enc.{i}.l_v"), spec.d_v));
        out.push((format!("enc.{i}.l_ff"), spec.d_ff));
    }
    for i in 0..spec.dec_layers {
        out.push((format!("dec.{i}.self.l_k"), spec.d_k));
        out.push((format!("dec.{i}.self.l_v"), spec.d_v));
        out.push((format!("dec.{i}.cross.l_k"), spec.d_k));
        out.push((format!("dec.{i}.cross.l_v"), spec.d_v));
        out.push((format!("dec.{i}.l_ff"), spec.d_ff));
    }
    out
}

fn site_name(site: Site) -> String {
    match site {
        Site::EncK(i) => format!("enc.{i}.l_k"),
        Site::EncV(i) => format!("enc.{i}.l_v"),
        Site::EncFf(i) => format!("enc.{i}.l_ff"),
        Site::SelfK(i) => format!("dec.{i}.self.l_k"),
        Site::SelfV(i) => format!("dec.{i}.self.l_v"),
        Site::CrossK(i) => format!("dec.{i}.cross.l_k"),
        Site::CrossV(i) => format!("dec.{i}.cross.l_v"),
        Site::DecFf(i) => format!("dec.{i}.l_ff"),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IA3Adapter<F> {
    spec: ModelSpec,
    vectors: BTreeMap<String, Tensor<F>>,
}

/// Fresh adapter with every element equal to one, which leaves the model
/// function unchanged.
pub fn init_adapter<F: Real>(spec: &ModelSpec) -> Result<IA3Adapter<F>> {
    IA3Adapter::filled(spec, F::one())
}

impl<F: Real> IA3Adapter<F> {
    pub fn filled(spec: &ModelSpec, value: F) -> Result<Self> {
        let vectors = adapter_shapes(spec)
            .into_iter()
            .map(|(name, n)| Ok((name, Tensor::full(&[n], value)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: spec.clone(),
            vectors,
        })
    }

    /// Builds an adapter from named vectors, checking names and lengths.
    pub fn from_vectors(spec: &ModelSpec, vectors: BTreeMap<String, Tensor<F>>) -> Result<Self> {
        let shapes = adapter_shapes(spec);
        if shapes.len() != vectors.len() {
            return Err(Error::Contract(format!(
                "expected {} adapter vectors, got {}",
                shapes.len(),
                vectors.len()
            )));
        }
        for (name, n) in &shapes {
            let t = vectors
                .get(name)
                .ok_or_else(|| Error::Contract(format!("missing adapter vector `{name}`")))?;
            if t.shape() != [*n] {
                return Err(Error::shape("IA3Adapter::from_vectors", &[*n], t.shape()));
            }
        }
        Ok(Self {
            spec: spec.clone(),
            vectors,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn vectors(&self) -> &BTreeMap<String, Tensor<F>> {
        &self.vectors
    }

    pub fn vectors_mut(&mut self) -> &mut BTreeMap<String, Tensor<F>> {
        &mut self.vectors
    }

    pub fn vector(&self, name: &str) -> Result<&Tensor<F>> {
        self.vectors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown adapter vector `{name}`")))
    }

    pub fn num_vectors(&self) -> usize {
        self.vectors.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.vectors.values().map(Tensor::len).sum()
    }

    pub fn cast<G: Real>(&self) -> IA3Adapter<G> {
        IA3Adapter {
            spec: self.spec.clone(),
            vectors: self.vectors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Rounds every element through `f32`, the storage precision.
    pub fn round_to_storage(&self) -> Self {
        IA3Adapter {
            spec: self.spec.clone(),
            vectors: self
                .vectors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<f32>().cast()))
                .collect(),
        }
    }

    pub(crate) fn conforms_to(&self, spec: &ModelSpec) -> bool {
        self.spec.enc_layers == spec.enc_layers
            && self.spec.dec_layers == spec.dec_layers
            && self.spec.d_k == spec.d_k
            && self.spec.d_v == spec.d_v
            && self.spec.d_ff == spec.d_ff
    }

    pub fn bind<'t>(&self, tape: &'t Tape<F>, trainable: bool) -> Result<BoundAdapter<'t, F>> {
        let vars = self
            .vectors
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
            .collect::<BTreeMap<_, _>>();
        let get = |name: String| -> Result<Var<'t, F>> {
            vars.get(&name)
                .copied()
                .ok_or_else(|| Error::Contract(format!("missing adapter vector `{name}`")))
        };
        let mut sites = Vec::new();
        for i in 0..self.spec.enc_layers {
            for s in [Site::EncK(i), Site::EncV(i), Site::EncFf(i)] {
                sites.push((s, get(site_name(s))?));
            }
        }
        for i in 0..self.spec.dec_layers {
            for s in [
                Site::SelfK(i),
                Site::SelfV(i),
                Site::CrossK(i),
                Site::CrossV(i),
                Site::DecFf(i),
            ] {
                sites.push((s, get(site_name(s))?));
            }
        }
        Ok(BoundAdapter {
            spec: self.spec.clone(),
            sites: sites.into_iter().collect(),
            vars,
        })
    }
}

/// Adapter vectors recorded on a tape.
pub struct BoundAdapter<'t, F> {
    spec: ModelSpec,
    sites: std::collections::HashMap<Site, Var<'t, F>>,
    vars: BTreeMap<String, Var<'t, F>>,
}

impl<'t, F: Real> BoundAdapter<'t, F> {
    pub(crate) fn site(&self, site: Site) -> Var<'t, F> {
        self.sites[&site]
    }

    pub fn vars(&self) -> &BTreeMap<String, Var<'t, F>> {
        &self.vars
    }

    pub(crate) fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        let ok = self.spec.enc_layers == spec.enc_layers
            && self.spec.dec_layers == spec.dec_layers
            && self.spec.d_k == spec.d_k
            && self.spec.d_v == spec.d_v
            && self.spec.d_ff == spec.d_ff;
        if ok {
            Ok(())
        } else {
            Err(Error::Contract("adapter was built for a different model spec".into()))
        }
    }
}

fn scale_columns<F: Real>(w: &mut Tensor<F>, l: &Tensor<F>) {
    let cols = w.cols();
    for (i, x) in w.data_mut().iter_mut().enumerate() {
        *x *= l.data()[i % cols];
    }
}

fn scale_rows<F: Real>(w: &mut Tensor<F>, l: &Tensor<F>) {
    let cols = w.cols();
    for (i, x) in w.data_mut().iter_mut().enumerate() {
        *x *= l.data()[i / cols];
    }
}

/// Folds the adapter into the base weights, using `l ⊙ (x W) = x (W diag l)`:
/// key and value projections get their output columns scaled, and the second
/// FFN matrix gets its input rows scaled.
pub fn merge<F: Real>(model: &Model<F>, adapter: &IA3Adapter<F>) -> Result<Model<F>> {
    if !adapter.conforms_to(model.spec()) {
        return Err(Error::Contract("adapter was built for a different model spec".into()));
    }
    let mut merged = model.clone();
    let spec = model.spec().clone();
    let w = merged.weights_mut();
    let mut fold = |weight: String, vector: String, rows: bool| -> Result<()> {
        let l = adapter.vector(&vector)?;
        let t = w
            .get_mut(&weight)
            .ok_or_else(|| Error::Contract(format!("unknown weight `{weight}`")))?;
        if rows {
            scale_rows(t, l);
        } else {
            scale_columns(t, l);
        }
        Ok(())
    };
    for i in 0..spec.enc_layers {
        fold(format!("enc.{i}.attn.k"), format!("enc.{i}.l_k"), false)?;
        fold(format!("enc.{i}.attn.v"), format!("enc.{i}.l_v"), false)?;
        fold(format!("enc.{i}.ffn.w2"), format!("enc.{i}.l_ff"), true)?;
    }
    for i in 0..spec.dec_layers {
        fold(format!("dec.{i}.self.k"), format!("dec.{i}.self.l_k"), false)?;
        fold(format!("dec.{i}.self.v"), format!("dec.{i}.self.l_v"), false)?;
        fold(format!("dec.{i}.cross.k"), format!("dec.{i}.cross.l_k"), false)?;
        fold(format!("dec.{i}.cross.v"), format!("dec.{i}.cross.l_v"), false)?;
        fold(format!("dec.{i}.ffn.w2"), format!("dec.{i}.l_ff"), true)?;
    }
    Ok(merged)
}

/// Per-task adapters for one model spec, held in single precision.
#[derive(Clone, Debug, Default)]
pub struct AdapterStore {
    spec: Option<ModelSpec>,
    adapters: BTreeMap<String, IA3Adapter<f32>>,
}

impl AdapterStore {
    pub fn new(spec: &ModelSpec) -> Self {
        Self {
            spec: Some(spec.clone()),
            adapters: BTreeMap::new(),
        }
    }

    pub fn insert<F: Real>(&mut self, task: impl Into<String>, adapter: &IA3Adapter<F>) -> Result<()> {
        match &self.spec {
            Some(spec) if !adapter.conforms_to(spec) => {
                return Err(Error::Contract("adapter does not match the store's model spec".into()))
            }
            Some(_) => {}
            None => self.spec = Some(adapter.spec().clone()),
        }
        self.adapters.insert(task.into(), adapter.cast());
        Ok(())
    }

    pub fn get(&self, task: &str) -> Result<&IA3Adapter<f32>> {
        self.adapters
            .get(task)
            .ok_or_else(|| Error::UnknownTask(task.to_string()))
    }

    pub fn tasks(&self) -> impl Iterator<Item = &str> {
        self.adapters.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }
}

/// Adapters resolved for each example of a mixed-task batch.
#[derive(Clone, Debug)]
pub struct BatchAdapters<F> {
    distinct: Vec<IA3Adapter<F>>,
    assignment: Vec<usize>,
}

/// Looks up each example's task adapter. Unknown ids fail with the id.
pub fn select_for_batch<F: Real>(store: &AdapterStore, task_ids: &[&str]) -> Result<BatchAdapters<F>> {
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    let mut distinct = Vec::new();
    let mut assignment = Vec::with_capacity(task_ids.len());
    for &id in task_ids {
        let slot = match index.get(id) {
            Some(&s) => s,
            None => {
                distinct.push(store.get(id)?.cast());
                index.insert(id, distinct.len() - 1);
                distinct.len() - 1
            }
        };
        assignment.push(slot);
    }
    Ok(BatchAdapters { distinct, assignment })
}

impl<F: Real> BatchAdapters<F> {
    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn adapter_for(&self, example: usize) -> &IA3Adapter<F> {
        &self.distinct[self.assignment[example]]
    }

    /// Teacher-forced logits for every example in one packed forward pass,
    /// each example rescaled by its own adapter.
    pub fn logits(&self, model: &Model<F>, inputs: &[&[usize]], targets: &[&[usize]]) -> Result<Vec<Tensor<F>>> {
        if inputs.len() != self.len() || targets.len() != self.len() {
            return Err(Error::Contract(format!(
                "batch of {} adapters given {} inputs and {} targets",
                self.len(),
                inputs.len(),
                targets.len()
            )));
        }
        if self.is_empty() {
            return Ok(Vec::new());
        }
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let bound_adapters = self
            .distinct
            .iter()
            .map(|a| a.bind(&tape, false))
            .collect::<Result<Vec<_>>>()?;
        let per_example: Vec<Option<&BoundAdapter<'_, F>>> =
            self.assignment.iter().map(|&s| Some(&bound_adapters[s])).collect();
        let segments: Vec<DecodeSegment<'_>> = targets
            .iter()
            .enumerate()
            .map(|(example, target)| DecodeSegment { example, target })
            .collect();
        let packed = bound.forward_packed(&per_example, inputs, &segments)?;
        let all = packed.logits.value();
        let vocab = all.cols();
        packed
            .offsets
            .iter()
            .zip(&packed.lens)
            .map(|(&o, &n)| Tensor::matrix(n, vocab, all.data()[o * vocab..(o + n) * vocab].to_vec()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    #[test]
    fn toy_count_is_640() {
        let spec = ModelSpec::toy();
        assert_eq!(ia3_param_count(&spec), 640);
        let a: IA3Adapter<f64> = init_adapter(&spec).unwrap();
        assert_eq!(a.num_scalars(), 640);
        assert_eq!(a.num_vectors(), 3 * 2 + 5 * 2);
        assert!(a.vectors().values().all(|t| t.data().iter().all(|&x| x == 1.0)));
    }

    #[test]
    fn large_spec_counts() {
        assert_eq!(ia3_param_count(&ModelSpec::t0_3b_dims()), 540_672);
        assert_eq!(ia3_param_count(&ModelSpec::t0_11b_dims()), 1_081_344);
        let mut empty = ModelSpec::toy();
        empty.enc_layers = 0;
        empty.dec_layers = 0;
        assert_eq!(ia3_param_count(&empty), 0);
    }

    #[test]
    fn merge_with_ones_is_bit_identical() {
        let m: Model<f64> = build_model(&ModelSpec::toy(), 1).unwrap();
        let ones = init_adapter(m.spec()).unwrap();
        assert_eq!(merge(&m, &ones).unwrap(), m);
    }

    #[test]
    fn merge_rejects_mismatched_spec() {
        let m: Model<f64> = build_model(&ModelSpec::toy(), 1).unwrap();
        let mut other = ModelSpec::toy();
        other.d_ff = 16;
        let a = init_adapter(&other).unwrap();
        assert!(matches!(merge(&m, &a), Err(Error::Contract(_))));
    }

    #[test]
    fn unknown_task_is_named() {
        let store = AdapterStore::new(&ModelSpec::toy());
        let err = select_for_batch::<f64>(&store, &["missing"]).unwrap_err();
        assert!(matches!(err, Error::UnknownTask(ref id) if id == "missing"));
    }

    #[test]
    fn empty_batch_is_empty() {
        let m: Model<f64> = build_model(&ModelSpec::toy(), 1).unwrap();
        let store = AdapterStore::new(m.spec());
        let batch = select_for_batch::<f64>(&store, &[]).unwrap();
        assert!(batch.logits(&m, &[], &[]).unwrap().is_empty());
    }

    #[test]
    fn store_keeps_single_precision() {
        let spec = ModelSpec::toy();
        let mut a: IA3Adapter<f64> = init_adapter(&spec).unwrap();
        a.vectors_mut().get_mut("enc.0.l_k").unwrap().data_mut()[0] = 0.1;
        let mut store = AdapterStore::new(&spec);
        store.insert("t", &a).unwrap();
        let stored = store.get("t").unwrap().vector("enc.0.l_k").unwrap().data()[0];
        assert_eq!(stored, 0.1f32);
    }
}
