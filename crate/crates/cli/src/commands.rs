use std::fs;
use std::path::{Path, PathBuf};

use mixrag::data::{load_eval_examples, load_train_examples, write_jsonl, GraphSet};
use mixrag::embedding::{EmbeddingKind, EmbeddingTable, HashEmbedder};
use mixrag::error::Error;
use mixrag::eval::{layer_sweep_csv, run_ablation, run_eval, sweep_layers, EvalConfig};
use mixrag::gate::ExpertSet;
use mixrag::graph::{convert_tsv, load_graph};
use mixrag::model::{Model, ModelConfig};
use mixrag::prompt::{GenerationBackend, HttpBackend, MockBackend};
use mixrag::synth::generate_synthetic;
use mixrag::training::{grad_check, train, CheckObjective, GradCheckOptions};

use crate::settings::Settings;
use crate::{Command, Failure, RunArgs, EXIT_DATA, EXIT_DEGRADED};

pub fn run(command: Command, mut s: Settings) -> Result<u8, Failure> {
    match command {
        Command::Convert { input, output } => convert(&input, &output),
        Command::Embed { graph, out_dir, dim } => {
            if let Some(d) = dim {
                s.set("dim", d);
            }
            embed(&graph, out_dir, &s)
        }
        Command::Synth {
            out,
            num_graphs,
            nodes_per_graph,
            one_hop_fraction,
            train_queries,
            eval_queries,
        } => {
            set_opt(&mut s, "num_graphs", num_graphs);
            set_opt(&mut s, "nodes_per_graph", nodes_per_graph);
            set_opt(&mut s, "one_hop_fraction", one_hop_fraction);
            set_opt(&mut s, "train_queries", train_queries);
            set_opt(&mut s, "eval_queries", eval_queries);
            synth(&out, &s)
        }
        Command::Train {
            data,
            corpus,
            out,
            epochs,
            learning_rate,
            batch_size,
            dim,
        } => {
            set_opt(&mut s, "epochs", epochs);
            set_opt(&mut s, "learning_rate", learning_rate);
            set_opt(&mut s, "batch_size", batch_size);
            set_opt(&mut s, "dim", dim);
            train_cmd(&data.graphs, &corpus, &out, &s)
        }
        Command::Eval { run, sweep_layers, corpus } => {
            apply_run_flags(&mut s, &run);
            match sweep_layers {
                Some(layers) => {
                    let corpus = corpus.ok_or_else(|| Failure::usage("--sweep-layers needs --corpus"))?;
                    sweep(&run, &corpus, &layers, &s)
                }
                None => eval_cmd(&run, &s),
            }
        }
        Command::Ablate { run } => {
            apply_run_flags(&mut s, &run);
            ablate(&run, &s)
        }
        Command::Gradcheck {
            data,
            corpus,
            model,
            index,
            objective,
            tolerance,
        } => gradcheck(&data.graphs, &corpus, model.as_deref(), index, &objective, tolerance, &s),
    }
}

fn set_opt<T: std::fmt::Display>(s: &mut Settings, key: &str, v: Option<T>) {
    if let Some(v) = v {
        s.set(key, v);
    }
}

fn apply_run_flags(s: &mut Settings, run: &RunArgs) {
    set_opt(s, "experts", run.experts.as_ref());
    set_opt(s, "backend", run.backend.as_ref());
    set_opt(s, "endpoint", run.endpoint.as_ref());
    set_opt(s, "llm_model", run.llm_model.as_ref());
    set_opt(s, "metric", run.metric.as_ref());
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Failure::from(Error::io(path, e)))
}

fn convert(input: &Path, output: &Path) -> Result<u8, Failure> {
    let text = fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let graph = convert_tsv(&text)?;
    write(output, &graph.to_json())?;
    println!(
        "{} nodes, {} relations, {} triples -> {}",
        graph.num_entities(),
        graph.relations().len(),
        graph.num_triples(),
        output.display()
    );
    Ok(0)
}

fn embed(graph_path: &Path, out_dir: Option<PathBuf>, s: &Settings) -> Result<u8, Failure> {
    let graph = load_graph(graph_path)?;
    let dim = s.model()?.dim;
    let table = EmbeddingTable::from_hash(&graph, &HashEmbedder::new(dim, s.embed_seed()?)?)?;
    let stem = graph_path
        .file_stem()
        .and_then(|x| x.to_str())
        .ok_or_else(|| Failure::usage(format!("bad graph path {}", graph_path.display())))?;
    let dir = out_dir.unwrap_or_else(|| graph_path.parent().unwrap_or(Path::new(".")).to_path_buf());
    for (kind, suffix) in [
        (EmbeddingKind::Node, "nodes"),
        (EmbeddingKind::Relation, "relations"),
        (EmbeddingKind::Triple, "triples"),
    ] {
        write(&dir.join(format!("{stem}.{suffix}.emb")), &table.section_text(kind))?;
    }
    println!("wrote {dim}-dimensional embeddings for {stem} to {}", dir.display());
    Ok(0)
}

fn synth(out: &Path, s: &Settings) -> Result<u8, Failure> {
    let corpus = generate_synthetic(&s.synthetic()?)?;
    let graphs = out.join("graphs");
    fs::create_dir_all(&graphs).map_err(|e| Error::io(&graphs, e))?;
    for (name, g) in &corpus.graphs {
        g.save(graphs.join(format!("{name}.json")))?;
    }
    write_jsonl(out.join("train.jsonl"), &corpus.train)?;
    write_jsonl(out.join("eval.jsonl"), &corpus.eval)?;
    write_jsonl(out.join("eval_gold.jsonl"), &corpus.eval_gold)?;
    println!(
        "{} graphs, {} training and {} held-out queries -> {}",
        corpus.graphs.len(),
        corpus.train.len(),
        corpus.eval.len(),
        out.display()
    );
    Ok(0)
}

fn graph_set(dir: &Path, dim: usize, s: &Settings) -> Result<GraphSet, Failure> {
    let set = GraphSet::load_dir(dir, HashEmbedder::new(dim, s.embed_seed()?)?)?;
    if set.is_empty() {
        return Err(Failure { code: EXIT_DATA, message: format!("no graph files in {}", dir.display()) });
    }
    Ok(set)
}

fn train_cmd(graphs: &Path, corpus: &Path, out: &Path, s: &Settings) -> Result<u8, Failure> {
    let config = s.model()?;
    let set = graph_set(graphs, config.dim, s)?;
    let examples = load_train_examples(corpus)?;
    let mut model = Model::init(config, s.seed()?)?;
    let tc = mixrag::training::TrainConfig {
        checkpoint: Some(out.to_path_buf()),
        ..s.train()?
    };
    let report = train(&mut model, &examples, &set, &tc)?;
    let json = serde_json::json!({ "train": tc, "report": report });
    println!("{}", serde_json::to_string_pretty(&json).expect("report serializes"));
    Ok(0)
}

fn load_model(path: Option<&Path>) -> Result<Model, Failure> {
    let path = path.ok_or_else(|| Failure::usage("--model is required"))?;
    Ok(Model::load(path)?)
}

fn backend(s: &Settings, config: &ModelConfig) -> Result<Box<dyn GenerationBackend>, Failure> {
    Ok(match s.backend()? {
        None => Box::new(MockBackend::expecting(config.num_prompt_vectors, config.prompt_dim)),
        Some(http) => Box::new(HttpBackend::new(http)?),
    })
}

fn eval_cmd(run: &RunArgs, s: &Settings) -> Result<u8, Failure> {
    let model = load_model(run.model.as_deref())?;
    let set = graph_set(&run.data.graphs, model.config.dim, s)?;
    let dataset = load_eval_examples(&run.dataset)?;
    let backend = backend(s, &model.config)?;
    let report = run_eval(&model, &set, &dataset, backend.as_ref(), &s.eval()?)?;
    report.write(&run.out)?;
    print!("{}", report.summary());
    Ok(if report.degraded { EXIT_DEGRADED } else { 0 })
}

fn ablate(run: &RunArgs, s: &Settings) -> Result<u8, Failure> {
    let model = load_model(run.model.as_deref())?;
    let set = graph_set(&run.data.graphs, model.config.dim, s)?;
    let dataset = load_eval_examples(&run.dataset)?;
    let backend = backend(s, &model.config)?;
    let config = EvalConfig { active: ExpertSet::ALL, ..s.eval()? };
    let combos = ExpertSet::ablation_combos();
    let table = run_ablation(&model, &set, &dataset, backend.as_ref(), &config, &combos)?;
    for (combo, report) in combos.iter().zip(&table.reports) {
        report.write(run.out.join(combo.label()))?;
    }
    write(&run.out.join("ablation.csv"), &table.to_csv()?)?;
    write(&run.out.join("ablation.txt"), &table.to_text())?;
    print!("{}", table.to_text());
    Ok(if table.reports.iter().any(|r| r.degraded) { EXIT_DEGRADED } else { 0 })
}

fn sweep(run: &RunArgs, corpus: &Path, layers: &[usize], s: &Settings) -> Result<u8, Failure> {
    let base = s.model()?;
    let set = graph_set(&run.data.graphs, base.dim, s)?;
    let train_set = load_train_examples(corpus)?;
    let dataset = load_eval_examples(&run.dataset)?;
    let backend = backend(s, &base)?;
    let rows = sweep_layers(
        &base,
        s.seed()?,
        &train_set,
        &set,
        &s.train()?,
        &dataset,
        backend.as_ref(),
        &s.eval()?,
        layers,
    )?;
    let csv = layer_sweep_csv(&rows)?;
    write(&run.out.join("layer_sweep.csv"), &csv)?;
    for r in &rows {
        println!("layers {}: accuracy {:.4}, hit@1 {:.4}", r.layers, r.accuracy, r.hit_at_1);
    }
    Ok(0)
}

fn gradcheck(
    graphs: &Path,
    corpus: &Path,
    model: Option<&Path>,
    index: usize,
    objective: &str,
    tolerance: f64,
    s: &Settings,
) -> Result<u8, Failure> {
    let objective = match objective {
        "surrogate" => CheckObjective::Surrogate,
        "soft-prompt-norm" | "norm" => CheckObjective::SoftPromptNorm,
        "combined" => CheckObjective::Combined,
        other => return Err(Failure::usage(format!("unknown objective `{other}`"))),
    };
    let model = match model {
        Some(p) => Model::load(p)?,
        None => Model::init(s.model()?, s.seed()?)?,
    };
    let set = graph_set(graphs, model.config.dim, s)?;
    let examples = load_train_examples(corpus)?;
    let example = examples
        .get(index)
        .ok_or_else(|| Failure::usage(format!("corpus has {} examples, no index {index}", examples.len())))?;
    let context = set.get(&example.graph)?;
    let query = set.embed_query(&example.query)?;
    let opts = GradCheckOptions { objective, ..GradCheckOptions::default() };
    let report = grad_check(&model, context, &query, example, &opts)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(if report.max_error > tolerance { EXIT_DEGRADED } else { 0 })
}
