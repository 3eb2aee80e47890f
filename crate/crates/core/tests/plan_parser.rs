use proptest::prelude::*;

use kgrag::logic::{LogicPlan, PLAN_CLOSE, PLAN_OPEN};

fn fenced(body: &str) -> String {
    format!("{PLAN_OPEN}\n{body}\n{PLAN_CLOSE}")
}

fn step_json() -> impl Strategy<Value = String> {
    let operator =
        prop::sample::select(vec!["Retrieve", "Filter", "Aggregate", "Math", "Compare", "Answer", "Bogus", ""]);
    let arg = prop_oneof![
        Just(r#"{"query": "height"}"#.to_string()),
        Just(r#"{"source": 1, "condition": "tall"}"#.to_string()),
        Just(r#"{"source": "s1", "fn": "max"}"#.to_string()),
        Just(r#"{"expr": "s1 - s2 / (s3"}"#.to_string()),
        Just(r##"{"left": "#1", "right": 2}"##.to_string()),
        Just(r#"{"refs": [1, 2, 99]}"#.to_string()),
        Just("null".to_string()),
        "[a-z{}\\[\\]\":, 0-9]{0,20}",
    ];
    (-2i64..12, operator, arg, prop::collection::vec(-3i64..12, 0..4)).prop_map(|(id, op, args, refs)| {
        format!(r#"{{"id": {id}, "subquery": "q{id}", "operator": "{op}", "args": {args}, "refs": {refs:?}}}"#)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn arbitrary_text_never_panics(text in "(?s).{0,400}") {
        let _ = LogicPlan::parse(&text);
        let _ = LogicPlan::parse(&fenced(&text));
    }

    #[test]
    fn plan_shaped_input_never_panics(steps in prop::collection::vec(step_json(), 0..8), max in 0usize..10) {
        let body = format!("[{}]", steps.join(","));
        if let Ok(plan) = LogicPlan::parse(&fenced(&body)) {
            let _ = plan.validate(max);
        }
    }

    #[test]
    fn truncated_plans_never_panic(steps in prop::collection::vec(step_json(), 1..6), cut in 0usize..400) {
        let full = fenced(&format!("[{}]", steps.join(",")));
        let end = full.char_indices().map(|(i, _)| i).take_while(|i| *i <= cut).last().unwrap_or(0);
        let _ = LogicPlan::parse(&full[..end]);
    }
}

#[test]
fn valid_plan_round_trips() {
    let body = r#"[{"id":1,"subquery":"a","operator":"Retrieve","args":{"query":"a"},"refs":[]},
 {"id":2,"subquery":"answer","operator":"Answer","args":{"refs":[1]},"refs":[1]}]"#;
    let plan = LogicPlan::parse(&format!("Here is the plan.\n{}\nDone.", fenced(body))).unwrap();
    assert_eq!(plan.steps.len(), 2);
    plan.validate(8).unwrap();
    assert!(plan.validate(1).is_err());
}
