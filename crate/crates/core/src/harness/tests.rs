use super::*;

const ECHO: &str = include_str!("../../manifests/echo.json");

fn sim(json: &str) -> RunOutput {
    let cfg = ScenarioConfig::from_json(json).unwrap();
    run_scenario(&cfg, RunOptions::default()).unwrap()
}

#[test]
fn echo_pair_is_zero_copy_and_fully_delivered() {
    let out = sim(ECHO);
    let s = &out.summary;
    assert!(s.per_request.completed > 0);
    assert_eq!(s.counters.software_copies(), 0);
    assert_eq!(s.violations.total, 0, "{}", out.summary_json);
    assert!(s.conservation.ok, "{}", out.summary_json);
    let t = &s.tenants[&TenantId(1)];
    assert_eq!(t.issued, t.delivered);
}

fn with(json: &str, edit: impl FnOnce(&mut serde_json::Value)) -> String {
    let mut v: serde_json::Value = serde_json::from_str(json).unwrap();
    edit(&mut v);
    v.to_string()
}

fn diagnostics(json: &str) -> Vec<String> {
    match ScenarioConfig::from_json(json).and_then(|c| c.validate()) {
        Ok(_) => Vec::new(),
        Err(e) => e.fields().iter().map(|f| f.field.clone()).collect(),
    }
}

#[test]
fn bundled_manifests_validate() {
    for m in [
        ECHO,
        include_str!("../../manifests/fairness.json"),
        include_str!("../../manifests/fairness_fcfs.json"),
        include_str!("../../manifests/chain.json"),
        include_str!("../../manifests/chain_colocated.json"),
        include_str!("../../manifests/ingress.json"),
        include_str!("../../manifests/primitive.json"),
    ] {
        assert_eq!(diagnostics(m), Vec::<String>::new());
    }
}

#[test]
fn invalid_fields_are_named() {
    let bad = with(ECHO, |v| {
        v["tenants"][0]["weight"] = 0.into();
        v["functions"][0]["app"]["target"] = 9.into();
        v["functions"][1]["node"] = 7.into();
        v["link"] = serde_json::json!({ "tx_depth": 0 });
    });
    let d = diagnostics(&bad);
    for field in ["tenants[0].weight", "functions[0].app.target", "functions[1].node", "link.tx_depth"] {
        assert!(d.iter().any(|f| f == field), "{field} missing from {d:?}");
    }
}

#[test]
fn call_cycles_are_rejected() {
    let cyclic = with(ECHO, |v| {
        v["functions"][1]["app"] = serde_json::json!({ "kind": "chain", "calls": [3] });
        v["functions"].as_array_mut().unwrap().push(serde_json::json!(
            { "id": 3, "tenant": 1, "node": 1, "app": { "kind": "chain", "calls": [2] } }
        ));
    });
    assert!(diagnostics(&cyclic).iter().any(|f| f.ends_with("app.calls")));
}

#[test]
fn unknown_fields_are_refused() {
    let typo = with(ECHO, |v| v["tenants"][0]["weigth"] = 3.into());
    assert!(ScenarioConfig::from_json(&typo).is_err());
}

#[test]
fn empty_run_writes_headers_only() {
    let out = sim(&with(ECHO, |v| v["duration_s"] = 0.into()));
    assert_eq!(out.csv.lines().count(), 1, "{}", out.csv);
    assert_eq!(out.summary.per_request.completed, 0);
    assert_eq!(out.summary.violations.total, 0);
}

#[test]
fn same_seed_same_bytes() {
    let a = sim(ECHO);
    let b = sim(ECHO);
    assert_eq!(a.csv, b.csv);
    assert_eq!(a.summary_json, b.summary_json);
    let c = run_scenario(
        &ScenarioConfig::from_json(&with(ECHO, |v| v["functions"][0]["app"]["load"] = serde_json::json!({ "kind": "open", "rate": 20000.0 }))).unwrap(),
        RunOptions { seed: Some(2), ..Default::default() },
    )
    .unwrap();
    assert_eq!(c.summary.seed, 2);
    assert_ne!(a.csv, c.csv);
}

#[test]
fn report_matches_run_summary() {
    let out = sim(include_str!("../../manifests/fairness.json"));
    let again = report(&out.csv, out.summary.fairness.settle_windows).unwrap();
    assert_eq!(again.ratio_error, out.summary.fairness.ratio_error);
    assert_eq!(again.phases.len(), out.summary.fairness.phases.len());
    assert!(report("not,a,metrics,file\n1,2", 0).is_err());
}

#[test]
fn sim_ingress_copies_once_each_way() {
    let cfg = with(include_str!("../../manifests/ingress.json"), |v| {
        v["duration_s"] = 2.into();
        v["ingress"]["load"]["phases"] = serde_json::json!([{ "start_s": 0.0, "stop_s": 2.0, "connections": 2 }]);
        v["ingress"]["load"]["requests_per_connection"] = 10.into();
    });
    let out = sim(&cfg);
    let s = &out.summary;
    let ok = s.ingress.as_ref().unwrap().http_statuses[&200];
    assert!(ok > 100, "{}", out.summary_json);
    assert_eq!(s.counters.copies_ingress_in, ok);
    assert_eq!(s.counters.copies_ingress_out, ok);
    assert_eq!(s.counters.copies_function_path, 0);
    // Ten requests per connection, so each connection reopened many times.
    assert!(s.ingress.as_ref().unwrap().stats.connections_opened >= ok / 10, "{}", out.summary_json);
    assert_eq!(s.violations.total, 0);
}
