use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use safebt_core::bt::parse_tree;
use safebt_core::cbf::{eval_with_gradient, parse_barrier, Params};
use safebt_core::safety::{validate_spec, BarrierLibrary, BarrierSpec};
use safebt_core::sim::{
    check_invariance, run_scenario_with, InvarianceConfig, RunError, SafetyConfig, Scenario, TraceSummary,
};
use safebt_registry::{Client, ClientError, Kind, Store, StoreError};
use serde_json::{json, Value};

use crate::args::*;
use crate::report::{CmdResult, ExitReport, INVALID, IO, USAGE};

fn read_text(path: &Path) -> Result<String, ExitReport> {
    fs::read_to_string(path).map_err(|e| {
        let code = if e.kind() == io::ErrorKind::InvalidData { INVALID } else { IO };
        ExitReport::fail(code, format!("cannot read {}: {e}", path.display()))
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ExitReport> {
    fs::write(path, bytes).map_err(|e| ExitReport::fail(IO, format!("cannot write {}: {e}", path.display())))
}

fn load_spec(path: &Path) -> Result<BarrierSpec, ExitReport> {
    BarrierSpec::from_json(&read_text(path)?).map_err(|e| ExitReport::fail(INVALID, format!("{}: {e}", path.display())))
}

fn check_spec(spec: &BarrierSpec) -> Result<(), ExitReport> {
    validate_spec(spec).map_err(|v| {
        ExitReport::fail(INVALID, format!("{} violation(s) in {}", v.len(), spec.id()))
            .with_errors(v.iter().map(ToString::to_string))
            .with_detail(json!({ "violations": v.iter().map(ToString::to_string).collect::<Vec<_>>() }))
    })
}

/// `a=1,b=2` lists, possibly repeated.
fn parse_params(items: &[String]) -> Result<Params, ExitReport> {
    let mut out = Params::new();
    for item in items.iter().flat_map(|s| s.split(',')).map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| ExitReport::fail(USAGE, format!("parameter `{item}` is not of the form name=value")))?;
        let v: f64 =
            v.trim().parse().map_err(|_| ExitReport::fail(USAGE, format!("parameter `{k}`: `{v}` is not a number")))?;
        out.insert(k.trim().to_owned(), v);
    }
    Ok(out)
}

fn parse_vector(s: &str) -> Result<Vec<f64>, ExitReport> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| ExitReport::fail(USAGE, format!("`{t}` is not a number"))))
        .collect()
}

fn bind_params(spec: &BarrierSpec, overrides: &Params) -> Result<Params, ExitReport> {
    let mut bound = spec.defaults();
    for (k, v) in overrides {
        let decl = spec
            .param(k)
            .ok_or_else(|| ExitReport::fail(INVALID, format!("parameter `{k}` is not declared by {}", spec.id())))?;
        if !decl.contains(*v) {
            return Err(ExitReport::fail(INVALID, format!("parameter `{k}` = {v} is outside its declared range")));
        }
        bound.insert(k.clone(), *v);
    }
    if let Some(p) = spec.param_schema.iter().find(|p| !bound.contains_key(&p.name)) {
        return Err(ExitReport::fail(INVALID, format!("missing parameter `{}`", p.name)));
    }
    Ok(bound)
}

fn fmt_vec(v: &[f64]) -> String {
    format!("[{}]", v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", "))
}

pub fn validate(a: &ValidateArgs) -> CmdResult {
    let text = read_text(&a.path)?;
    match a.kind {
        KindArg::Spec => {
            let spec = BarrierSpec::from_json(&text)
                .map_err(|e| ExitReport::fail(INVALID, format!("{}: {e}", a.path.display())))?;
            check_spec(&spec)?;
            Ok(ExitReport::ok(format!("ok: {}", spec.id()), json!({ "spec": spec.id(), "valid": true })))
        }
        KindArg::Tree => {
            let tree =
                parse_tree(&text).map_err(|e| ExitReport::fail(INVALID, format!("{}: {e}", a.path.display())))?;
            Ok(ExitReport::ok(
                format!("ok: tree `{}` with {} nodes", tree.name(), tree.node_count()),
                json!({ "tree": tree.name(), "nodes": tree.node_count(), "valid": true }),
            ))
        }
    }
}

pub fn eval(a: &EvalArgs) -> CmdResult {
    let spec = load_spec(&a.spec)?;
    check_spec(&spec)?;
    let x = parse_vector(&a.x)?;
    if x.len() != spec.state_dim {
        return Err(ExitReport::fail(
            INVALID,
            format!("{} expects a {}-dimensional state, got {}", spec.id(), spec.state_dim, x.len()),
        ));
    }
    let params = bind_params(&spec, &parse_params(&a.params)?)?;
    let expr = parse_barrier(&spec.expression).expect("validated");
    let (h, grad) = eval_with_gradient(&expr, &x, &params).map_err(|e| ExitReport::fail(INVALID, e.to_string()))?;
    Ok(ExitReport::ok(
        format!("h = {h}\ngrad = {}\n", fmt_vec(&grad)),
        json!({ "spec": spec.id(), "x": x, "params": params, "h": h, "grad": grad }),
    ))
}

fn client_error(e: ClientError) -> ExitReport {
    let code = if e.is_transport() { IO } else { INVALID };
    let detail = match &e {
        ClientError::Conflict { existing, attempted, .. } => {
            json!({ "existing_digest": existing, "attempted_digest": attempted })
        }
        _ => Value::Null,
    };
    let report = match e {
        ClientError::Validation(errors) => ExitReport::fail(code, "rejected by registry").with_errors(errors),
        e => ExitReport::fail(code, e.to_string()),
    };
    report.with_detail(detail)
}

fn client(url: &str) -> Result<Client, ExitReport> {
    Client::new(url).map_err(client_error)
}

pub fn publish(a: &PublishArgs) -> CmdResult {
    let text = read_text(&a.path)?;
    let kind = Kind::from(a.kind);
    let (name, version) = match kind {
        Kind::Spec => {
            let spec = BarrierSpec::from_json(&text)
                .map_err(|e| ExitReport::fail(INVALID, format!("{}: {e}", a.path.display())))?;
            check_spec(&spec)?;
            if a.name.as_ref().is_some_and(|n| *n != spec.name)
                || a.version.as_ref().is_some_and(|v| *v != spec.version)
            {
                return Err(ExitReport::fail(
                    USAGE,
                    format!("--name/--version disagree with the document ({})", spec.id()),
                ));
            }
            (spec.name, spec.version)
        }
        Kind::Tree => {
            let tree =
                parse_tree(&text).map_err(|e| ExitReport::fail(INVALID, format!("{}: {e}", a.path.display())))?;
            let version =
                a.version.clone().ok_or_else(|| ExitReport::fail(USAGE, "--version is required for trees"))?;
            (a.name.clone().unwrap_or_else(|| tree.name().to_owned()), version)
        }
    };
    safebt_registry::check_name(&name).map_err(|e| ExitReport::fail(INVALID, e.to_string()))?;
    safebt_registry::check_version(&version).map_err(|e| ExitReport::fail(INVALID, e.to_string()))?;
    let (meta, created) = client(&a.registry.registry)?
        .publish(kind, &name, &version, text.as_bytes(), &a.publisher)
        .map_err(client_error)?;
    let verb = if created { "published" } else { "already published" };
    Ok(ExitReport::ok(
        format!("{verb} {kind} {}@{} sha256:{}", meta.name, meta.version, meta.digest),
        json!({ "created": created, "record": meta }),
    ))
}

pub fn fetch(a: &FetchArgs, format: Format) -> CmdResult {
    let (name, version) = a
        .reference
        .split_once('@')
        .ok_or_else(|| ExitReport::fail(USAGE, format!("`{}` is not of the form name@version", a.reference)))?;
    let kind = Kind::from(a.kind);
    let bytes = client(&a.registry.registry)?.fetch(kind, name, version).map_err(client_error)?;
    let digest = safebt_registry::sha256_hex(&bytes);
    match &a.output {
        Some(path) => {
            write_file(path, &bytes)?;
            Ok(ExitReport::ok(
                format!("fetched {kind} {name}@{version} sha256:{digest} -> {}", path.display()),
                json!({ "name": name, "version": version, "digest": digest, "output": path }),
            ))
        }
        None if format == Format::Text => {
            io::stdout().write_all(&bytes).map_err(|e| ExitReport::fail(IO, e.to_string()))?;
            Ok(ExitReport::ok("", Value::Null))
        }
        None => Ok(ExitReport::ok(
            "",
            json!({ "name": name, "version": version, "digest": digest, "payload": String::from_utf8_lossy(&bytes) }),
        )),
    }
}

pub fn query(a: &QueryArgs) -> CmdResult {
    let kind = Kind::from(a.kind);
    let entries =
        client(&a.registry.registry)?.query(kind, a.prefix.as_deref(), a.tag.as_deref()).map_err(client_error)?;
    let mut text = String::new();
    for e in &entries {
        let _ = writeln!(text, "{}\t{}\t{}\t{}", e.name, e.versions.join(","), e.tags.join(","), e.digest);
    }
    Ok(ExitReport::ok(text, json!(entries)))
}

fn run_error(e: RunError) -> ExitReport {
    match e {
        RunError::Io(e) => ExitReport::fail(IO, format!("writing trace: {e}")),
        e => ExitReport::fail(INVALID, e.to_string()),
    }
}

pub fn run(a: &RunArgs) -> CmdResult {
    let scenario_text = read_text(&a.scenario)?;
    let tree_text = read_text(&a.tree)?;
    let mut library = BarrierLibrary::with_builtins();
    for path in &a.specs {
        let spec = load_spec(path)?;
        library.insert(spec).map_err(|e| ExitReport::fail(INVALID, format!("{}: {e}", path.display())))?;
    }
    let safety_override = match &a.safety {
        Some(p) => Some(
            serde_json::from_str::<SafetyConfig>(&read_text(p)?)
                .map_err(|e| ExitReport::fail(INVALID, format!("{}: {e}", p.display())))?,
        ),
        None => None,
    };

    let mut scenario = Scenario::from_json(&scenario_text)
        .map_err(|e| ExitReport::fail(INVALID, format!("{}: {e}", a.scenario.display())))?;
    let tree = parse_tree(&tree_text).map_err(|e| ExitReport::fail(INVALID, format!("{}: {e}", a.tree.display())))?;
    if let Some(d) = a.duration {
        scenario.duration = d;
    }
    if let Some(r) = a.rate {
        scenario.rate = r;
    }
    if let Some(s) = a.seed {
        scenario.seed = s;
    }
    scenario.validate().map_err(|e| ExitReport::fail(INVALID, e.to_string()))?;
    let mut safety = safety_override.unwrap_or_else(|| scenario.safety_config());
    if a.no_filter {
        safety.filter_enabled = false;
    }

    let mut trace = match &a.trace {
        Some(p) => Some(BufWriter::new(
            File::create(p).map_err(|e| ExitReport::fail(IO, format!("cannot write {}: {e}", p.display())))?,
        )),
        None => None,
    };
    let mut summary = TraceSummary::default();
    run_scenario_with(&scenario, &tree, &safety, &library, |record| {
        summary.add(&record);
        if let Some(out) = trace.as_mut() {
            serde_json::to_writer(&mut *out, &record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    })
    .map_err(run_error)?;
    if let Some(mut out) = trace {
        out.flush().map_err(|e| ExitReport::fail(IO, format!("writing trace: {e}")))?;
    }
    let table = summary.to_table();
    if let Some(p) = &a.summary {
        write_file(p, table.as_bytes())?;
    }
    Ok(ExitReport::ok(table, json!({ "summary": summary, "filter": safety.filter_enabled })))
}

pub fn check_invariance_cmd(a: &InvarianceArgs) -> CmdResult {
    let spec = load_spec(&a.spec)?;
    check_spec(&spec)?;
    let plant = a.plant.parse().map_err(|e: String| ExitReport::fail(USAGE, e))?;
    let params = parse_params(&a.params)?;
    bind_params(&spec, &params)?;
    let config = InvarianceConfig {
        plant,
        trials: a.trials,
        duration: a.duration,
        rate: a.rate,
        seed: a.seed,
        filter: !a.no_filter,
        speed: a.speed,
        ..InvarianceConfig::default()
    };
    let report = check_invariance(&spec, &params, &config).map_err(|e| ExitReport::fail(INVALID, e.to_string()))?;
    let mut text = String::from("trial      min_h  tick\n");
    for t in &report.trials {
        let _ = writeln!(
            text,
            "{:>5}  {:>9.6}  {:>4}{}",
            t.trial,
            t.min_h,
            t.min_tick,
            if t.passed { "" } else { "  VIOLATION" }
        );
    }
    let _ = writeln!(
        text,
        "{}: filter {}, {} trials, min h = {:.6}, {} trial(s) with h < 0",
        report.barrier,
        if report.filter { "on" } else { "off" },
        report.trials.len(),
        report.min_h,
        report.violations
    );
    let detail = serde_json::to_value(&report).expect("report serializes");
    if report.passed {
        Ok(ExitReport::ok(text, detail))
    } else {
        let failed = report.trials.iter().filter(|t| !t.passed).count();
        Err(ExitReport::fail(
            INVALID,
            format!("{failed} of {} trials fell below h = {}", report.trials.len(), config.tolerance),
        )
        .with_summary(text)
        .with_detail(detail))
    }
}

fn store_error(e: StoreError) -> ExitReport {
    match e {
        StoreError::Io(e) => ExitReport::fail(IO, e.to_string()),
        e => ExitReport::fail(INVALID, e.to_string()),
    }
}

pub fn serve(a: &ServeArgs) -> CmdResult {
    let store = Store::open(&a.store)
        .map_err(|e| ExitReport::fail(IO, format!("cannot open store {}: {e}", a.store.display())))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| ExitReport::fail(IO, e.to_string()))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(a.listen)
            .await
            .map_err(|e| ExitReport::fail(IO, format!("cannot listen on {}: {e}", a.listen)))?;
        let addr = listener.local_addr().map_err(|e| ExitReport::fail(IO, e.to_string()))?;
        eprintln!("serving {} on http://{addr}", a.store.display());
        safebt_registry::serve(listener, store).await.map_err(|e| ExitReport::fail(IO, e.to_string()))
    })?;
    Ok(ExitReport::ok("", Value::Null))
}

pub fn audit(a: &AuditArgs) -> CmdResult {
    if !a.store.is_dir() {
        return Err(ExitReport::fail(IO, format!("store {} does not exist", a.store.display())));
    }
    let store = Store::open(&a.store).map_err(|e| ExitReport::fail(IO, e.to_string()))?;
    let report = store.audit().map_err(store_error)?;
    let detail = serde_json::to_value(&report).expect("report serializes");
    let summary = format!("{} record(s) checked, {} finding(s)", report.records, report.findings.len());
    if report.clean() {
        Ok(ExitReport::ok(summary, detail))
    } else {
        let findings: BTreeMap<_, _> = report.findings.iter().map(|f| (f.path.clone(), f.problem.clone())).collect();
        Err(ExitReport::fail(INVALID, summary)
            .with_errors(findings.into_iter().map(|(p, m)| format!("{p}: {m}")))
            .with_detail(detail))
    }
}
