//! Byte-for-byte comparison of text artifacts against `tests/golden/`.
//! Run with `UPDATE_GOLDEN=1` to rewrite them.

mod common;

fn check(name: &str) {
    let (_, text) = common::golden_outputs()
        .into_iter()
        .find(|(n, _)| *n == name)
        .expect("known artifact");
    let path = common::golden_dir().join(name);
    if std::env::var("UPDATE_GOLDEN").is_ok_and(|v| v == "1") {
        std::fs::create_dir_all(common::golden_dir()).unwrap();
        std::fs::write(&path, &text).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(expected == text, "{name} differs from its golden file");
}

#[test]
fn model_text() {
    check("model.txt");
}

#[test]
fn trace_text() {
    check("trace.txt");
}

#[test]
fn profile_text() {
    check("profile.txt");
}

#[test]
fn optimized_model_text() {
    check("optimized.txt");
}

#[test]
fn layout_plan_text() {
    check("plan.txt");
}

#[test]
fn dyno_stats_report() {
    check("dyno.txt");
}

#[test]
fn heat_map_csv() {
    check("heatmap.csv");
}

#[test]
fn golden_artifacts_parse_back() {
    let dir = common::golden_dir();
    let model_text = std::fs::read_to_string(dir.join("model.txt")).unwrap();
    let model = postlink::model::parse_model(&model_text).unwrap();
    assert_eq!(postlink::model::serialize_model(&model), model_text);
    let trace_text = std::fs::read_to_string(dir.join("trace.txt")).unwrap();
    let trace = postlink::trace::parse_trace(&trace_text);
    assert_eq!(postlink::trace::render_trace(&trace.stacks, &trace.samples), trace_text);
    let profile = std::fs::read_to_string(dir.join("profile.txt")).unwrap();
    let (flow, calls) = postlink::profile::parse_profile(&profile, &model).unwrap();
    assert_eq!(postlink::profile::serialize_profile(&flow, &calls), profile);
    let plan = std::fs::read_to_string(dir.join("plan.txt")).unwrap();
    assert_eq!(postlink::passes::serialize_plan(&postlink::passes::parse_plan(&plan).unwrap()), plan);
}
