use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};

use blockstr::eval::{evaluate as run_eval, EvalOptions};
use blockstr::pipeline::build_index as build;
use blockstr::vlad::{read_descriptor_file, write_descriptor_file};
use blockstr::{
    aggregate, encode_permutations, normalize, search as run_search, select_references,
    synth_dataset, train_codebook, Codebook, GroundTruth, InvertedIndex, PipelineConfig,
    ReferenceSet, SearchMode, SynthConfig, VladStore, VladVector,
};

use crate::{
    BuildArgs, EncodeArgs, EvaluateArgs, SearchArgs, SelectRefsArgs, StatsArgs, SynthArgs,
    TrainArgs, UsageError,
};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Library parameter errors are usage errors too.
fn lib<T>(r: blockstr::Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        blockstr::Error::InvalidParameter(msg) => usage(msg),
        other => other.into(),
    })
}

fn ensure_distinct(outputs: &[&Path], inputs: &[&Path]) -> Result<()> {
    for (i, out) in outputs.iter().enumerate() {
        if inputs.contains(out) || outputs[..i].contains(out) {
            return Err(usage(format!(
                "output path {} is used twice",
                out.display()
            )));
        }
    }
    Ok(())
}

fn encode_all(path: &Path, codebook: &Codebook) -> Result<Vec<VladVector>> {
    let (dim, sets) = read_descriptor_file(path)
        .with_context(|| format!("reading descriptors from {}", path.display()))?;
    if dim != codebook.dim() {
        bail!(
            "descriptor dimension {dim} does not match codebook dimension {}",
            codebook.dim()
        );
    }
    let vectors = sets
        .iter()
        .map(|s| aggregate(s, codebook).map(|v| normalize(&v)))
        .collect::<blockstr::Result<Vec<_>>>()?;
    Ok(vectors)
}

fn warn_degenerate(vectors: &[VladVector]) {
    for v in vectors.iter().filter(|v| v.is_degenerate()) {
        eprintln!("warning: image {} has an all-zero VLAD", v.image_id);
    }
}

pub fn synth(a: SynthArgs) -> Result<()> {
    ensure_distinct(&[&a.out, &a.gt], &[])?;
    let config = SynthConfig {
        images: a.images,
        clusters: a.clusters,
        dim: a.dim,
        words: a.words,
        descriptors_per_image: a.descriptors_per_image,
        noise: a.noise,
        clutter: a.clutter,
        seed: a.seed,
    };
    let (sets, gt) = lib(synth_dataset(&config))?;
    write_descriptor_file(&a.out, a.dim, &sets)
        .with_context(|| format!("writing {}", a.out.display()))?;
    gt.save(&a.gt)
        .with_context(|| format!("writing {}", a.gt.display()))?;
    println!("images={} queries={}", sets.len(), gt.len());
    Ok(())
}

pub fn train_codebook_cmd(a: TrainArgs) -> Result<()> {
    if a.k == 0 {
        return Err(usage("-k must be positive"));
    }
    if a.sample_every == 0 {
        return Err(usage("--sample-every must be positive"));
    }
    ensure_distinct(&[&a.out], &[&a.descriptors])?;
    let (_, sets) = read_descriptor_file(&a.descriptors)
        .with_context(|| format!("reading descriptors from {}", a.descriptors.display()))?;
    let training: Vec<Vec<f32>> = sets
        .iter()
        .step_by(a.sample_every)
        .flat_map(|s| s.descriptors().iter().cloned())
        .collect();
    let (codebook, summary) = train_codebook(&training, a.k, a.seed)?;
    let bytes = codebook.save(&a.out)?;
    println!(
        "K={} d={} iterations={} converged={} bytes={bytes}",
        codebook.len(),
        codebook.dim(),
        summary.iterations,
        summary.converged
    );
    Ok(())
}

pub fn encode(a: EncodeArgs) -> Result<()> {
    if a.depth == Some(0) {
        return Err(usage("--depth must be positive"));
    }
    let mut outs: Vec<&Path> = vec![&a.out];
    if let Some(p) = &a.docs_out {
        outs.push(p);
    }
    ensure_distinct(&outs, &[&a.descriptors, &a.codebook])?;
    let codebook = Codebook::load(&a.codebook)
        .with_context(|| format!("reading codebook {}", a.codebook.display()))?;
    let vectors = encode_all(&a.descriptors, &codebook)?;
    warn_degenerate(&vectors);

    let docs = match (&a.refs, a.depth, &a.docs_out) {
        (Some(refs), Some(depth), Some(_)) => {
            let refs = ReferenceSet::load(refs)
                .with_context(|| format!("reading references {}", refs.display()))?;
            if depth > refs.len() {
                return Err(usage(format!("--depth {depth} exceeds m = {}", refs.len())));
            }
            let mut text = String::new();
            for v in &vectors {
                match encode_permutations(v, &refs, depth) {
                    Ok(p) => {
                        text.push_str(&p.to_document(v.image_id.clone()).to_text_line());
                        text.push('\n');
                    }
                    Err(blockstr::Error::Unindexable(_)) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            Some(text)
        }
        (None, None, None) => None,
        _ => return Err(usage("--refs, --depth and --docs-out go together")),
    };

    let store = VladStore::from_vectors(&vectors)?;
    let bytes = store.save(&a.out)?;
    if let (Some(text), Some(path)) = (docs, &a.docs_out) {
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    println!(
        "images={} blocks={} block_dim={} bytes={bytes}",
        store.len(),
        store.num_blocks(),
        store.block_dim()
    );
    Ok(())
}

pub fn select_refs(a: SelectRefsArgs) -> Result<()> {
    if a.m == 0 {
        return Err(usage("--m must be positive"));
    }
    ensure_distinct(&[&a.out], &[&a.store])?;
    let store = VladStore::load(&a.store)
        .with_context(|| format!("reading vector store {}", a.store.display()))?;
    let refs = lib(select_references(
        store.vectors(),
        a.m,
        a.mode.into(),
        a.seed,
    ))?;
    let bytes = refs.save(&a.out)?;
    println!(
        "m={} mode={} dim={} bytes={bytes}",
        refs.len(),
        refs.mode().as_str(),
        refs.dim()
    );
    Ok(())
}

pub fn build_index(a: BuildArgs) -> Result<()> {
    let mode: SearchMode = a.mode.into();
    if a.kx == 0 {
        return Err(usage("--kx must be positive"));
    }
    if a.prune_docs == Some(0) {
        return Err(usage("--prune-docs must be positive"));
    }
    if a.store.is_none() && a.descriptors.is_none() {
        return Err(usage("one of --store or --descriptors is required"));
    }
    if a.store_out.is_some() && a.descriptors.is_none() {
        return Err(usage("--store-out only applies with --descriptors"));
    }
    match (&a.refs, a.m) {
        (None, None) => return Err(usage("one of --refs or --m is required")),
        (None, Some(0)) => return Err(usage("--m must be positive")),
        (None, Some(m)) if a.kx > m => return Err(usage(format!("--kx {} exceeds --m {m}", a.kx))),
        (Some(_), _) if a.refs_out.is_some() => {
            return Err(usage("--refs-out only applies when sampling with --m"))
        }
        _ => {}
    }
    let mut outs: Vec<&Path> = vec![&a.out];
    outs.extend(a.refs_out.as_deref());
    outs.extend(a.store_out.as_deref());
    let mut ins: Vec<&Path> = Vec::new();
    ins.extend(a.store.as_deref());
    ins.extend(a.descriptors.as_deref());
    ins.extend(a.codebook.as_deref());
    ins.extend(a.refs.as_deref());
    ensure_distinct(&outs, &ins)?;

    let vectors = match (&a.store, &a.descriptors, &a.codebook) {
        (Some(path), _, _) => VladStore::load(path)
            .with_context(|| format!("reading vector store {}", path.display()))?
            .vectors()
            .to_vec(),
        (None, Some(desc), Some(cb)) => {
            let codebook =
                Codebook::load(cb).with_context(|| format!("reading codebook {}", cb.display()))?;
            encode_all(desc, &codebook)?
        }
        _ => unreachable!("checked above"),
    };
    let refs = match (&a.refs, a.m) {
        (Some(path), _) => ReferenceSet::load(path)
            .with_context(|| format!("reading references {}", path.display()))?,
        (None, Some(m)) => lib(select_references(&vectors, m, mode.ref_mode(), a.seed))?,
        _ => unreachable!("checked above"),
    };
    if refs.mode() != mode.ref_mode() {
        return Err(usage(format!(
            "mode {mode} needs {} references, got {}",
            mode.ref_mode().as_str(),
            refs.mode().as_str()
        )));
    }
    let config = PipelineConfig {
        mode,
        k_x: a.kx,
        // query side is irrelevant here; keep it valid for validation
        k_q: 1,
        prune_query: (mode == SearchMode::BstrTfidf).then_some(1),
        prune_docs: a.prune_docs,
        ..PipelineConfig::default()
    };
    let built = lib(build(&vectors, &refs, &config))?;
    for id in &built.skipped {
        eprintln!("warning: skipping image {id}: all-zero VLAD cannot be indexed");
    }
    let bytes = built.index.save(&a.out)?;
    if let Some(path) = &a.refs_out {
        refs.save(path)?;
    }
    if let Some(path) = &a.store_out {
        VladStore::from_vectors(&vectors)?.save(path)?;
    }
    println!(
        "N={} postings={} bytes={bytes}",
        built.index.len(),
        built.index.postings_count()
    );
    Ok(())
}

pub fn search(a: SearchArgs) -> Result<()> {
    let mode: SearchMode = a.mode.into();
    if mode == SearchMode::RStr && a.store.is_none() {
        return Err(usage("rstr needs --store"));
    }
    let config = PipelineConfig {
        mode,
        k_x: a.kx,
        k_q: a.kq,
        c: a.c,
        k: a.k,
        prune_query: a.prune_query,
        prune_docs: None,
    };
    let index = InvertedIndex::load(&a.index)
        .with_context(|| format!("reading index {}", a.index.display()))?;
    let refs = ReferenceSet::load(&a.refs)
        .with_context(|| format!("reading references {}", a.refs.display()))?;
    lib(config.validate(refs.len()))?;
    let queries = VladStore::load(&a.queries)
        .with_context(|| format!("reading queries {}", a.queries.display()))?;
    let store = match &a.store {
        Some(p) => Some(
            VladStore::load(p).with_context(|| format!("reading vector store {}", p.display()))?,
        ),
        None => None,
    };
    let query = queries
        .get(&a.query_id)
        .with_context(|| format!("query {} not found in {}", a.query_id, a.queries.display()))?;
    let result = lib(run_search(query, &index, &refs, &config, store.as_ref()))?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (rank, hit) in result.hits.iter().enumerate() {
        if mode == SearchMode::RStr {
            writeln!(out, "{}\t{}\t{:.6}", rank + 1, hit.doc_id, hit.score)?;
        } else {
            writeln!(out, "{}\t{}\t{}", rank + 1, hit.doc_id, hit.score as u64)?;
        }
    }
    Ok(())
}

pub fn evaluate(a: EvaluateArgs, threads: usize) -> Result<()> {
    let mode: SearchMode = a.mode.into();
    if a.kq.is_empty() {
        return Err(usage("--kq needs at least one value"));
    }
    if mode == SearchMode::BstrTfidf && a.prune_query.is_empty() {
        return Err(usage("bstr-tfidf needs --prune-query"));
    }
    if mode != SearchMode::BstrTfidf && !a.prune_query.is_empty() {
        return Err(usage("--prune-query only applies to bstr-tfidf"));
    }
    if a.recall.contains(&0) {
        return Err(usage("--recall depths must be positive"));
    }
    let mut outs: Vec<&Path> = Vec::new();
    outs.extend(a.report.as_deref());
    outs.extend(a.csv.as_deref());
    ensure_distinct(&outs, &[&a.index, &a.refs, &a.store, &a.gt])?;

    let prune_levels: Vec<Option<usize>> = if a.prune_query.is_empty() {
        vec![None]
    } else {
        a.prune_query.iter().map(|&p| Some(p)).collect()
    };
    let configs: Vec<PipelineConfig> =
        a.kq.iter()
            .flat_map(|&kq| {
                prune_levels.iter().map(move |&p| PipelineConfig {
                    mode,
                    k_x: a.kx,
                    k_q: kq,
                    c: a.c,
                    k: a.k,
                    prune_query: p,
                    prune_docs: a.prune_docs,
                })
            })
            .collect();

    let refs = ReferenceSet::load(&a.refs)
        .with_context(|| format!("reading references {}", a.refs.display()))?;
    for config in &configs {
        lib(config.validate(refs.len()))?;
    }
    let index = InvertedIndex::load(&a.index)
        .with_context(|| format!("reading index {}", a.index.display()))?;
    let store = VladStore::load(&a.store)
        .with_context(|| format!("reading vector store {}", a.store.display()))?;
    let gt = GroundTruth::load(&a.gt, !a.include_self)
        .with_context(|| format!("reading ground truth {}", a.gt.display()))?;
    let missing: Vec<&str> = gt
        .queries()
        .map(|(q, _)| q.as_str())
        .filter(|q| store.get(q).is_none())
        .collect();
    if !missing.is_empty() {
        bail!(
            "ground-truth queries missing from the store: {}",
            missing.join(",")
        );
    }

    let options = EvalOptions {
        recall_at: a.recall.clone(),
        exclude_query: !a.include_self,
        timing: !a.no_timing,
        threads,
    };
    let mut report_text = String::new();
    let mut csv = String::new();
    for config in &configs {
        let (report, _) = lib(run_eval(&store, &index, &refs, config, &gt, &options))?;
        if csv.is_empty() {
            csv.push_str(&report.csv_header());
            csv.push('\n');
        }
        csv.push_str(&report.csv_row());
        csv.push('\n');
        if !report_text.is_empty() {
            report_text.push('\n');
        }
        report_text.push_str(&report.to_text());
        println!(
            "mode={} k_q={} prune_query={} map={:.4} exact_map={:.4}",
            mode,
            config.k_q,
            config
                .prune_query
                .map_or_else(|| "none".into(), |p| p.to_string()),
            report.map,
            report.exact_map
        );
    }
    if let Some(path) = &a.report {
        fs::write(path, &report_text).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &a.csv {
        fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn stats(a: StatsArgs) -> Result<()> {
    let index = InvertedIndex::load(&a.index)
        .with_context(|| format!("reading index {}", a.index.display()))?;
    let bytes = fs::metadata(&a.index)?.len();
    let n = index.len();
    let postings = index.postings_count();
    println!("documents={n}");
    println!("terms={}", index.term_count());
    println!("postings={postings}");
    println!("bytes={bytes}");
    if n > 0 {
        println!("mean_terms_per_doc={:.2}", postings as f64 / n as f64);
    }
    Ok(())
}
