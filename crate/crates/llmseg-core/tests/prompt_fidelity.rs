//! The generation prompts are load-bearing: a one-byte drift (an extra
//! space, a reworded lead-in) changes what the language model returns and
//! silently shifts every downstream descriptor. These tests pin the exact
//! bytes against checked-in fixtures and round-trip the worked example
//! answers through the reply parser.

use llmseg_core::subclass::{build_prompt, parse_subclasses, PromptMode};

#[test]
fn bare_prompt_matches_the_fixtures_byte_for_byte() {
    let person = build_prompt("person", 10, PromptMode::P1).unwrap();
    assert_eq!(person, include_str!("fixtures/prompts/p1_person_10.txt"));

    let boat = build_prompt("boat", 1, PromptMode::P1).unwrap();
    assert_eq!(boat, include_str!("fixtures/prompts/p1_boat_1.txt"));
}

#[test]
fn worked_example_prompt_matches_the_fixtures_byte_for_byte() {
    let cow = build_prompt("cow", 10, PromptMode::P2).unwrap();
    assert_eq!(cow, include_str!("fixtures/prompts/p2_cow_10.txt"));

    let person = build_prompt("person", 3, PromptMode::P2).unwrap();
    assert_eq!(person, include_str!("fixtures/prompts/p2_person_3.txt"));
}

#[test]
fn worked_example_answers_round_trip_through_the_parser() {
    // The two canned answers embedded in the worked-example prompt must come
    // back out of the parser unchanged.
    assert_eq!(
        parse_subclasses("female, male, child", 3).unwrap(),
        vec!["female", "male", "child"]
    );
    assert_eq!(
        parse_subclasses("fishing boat, cruise ship, ship", 3).unwrap(),
        vec!["fishing boat", "cruise ship", "ship"]
    );
}

#[test]
fn prompt_embeds_its_own_worked_examples() {
    // The worked-example flavor quotes both canned Q/A pairs verbatim ahead
    // of the real question.
    let prompt = build_prompt("cow", 10, PromptMode::P2).unwrap();
    let p1_tail = build_prompt("cow", 10, PromptMode::P1).unwrap();
    assert!(prompt.contains("A1:female, male, child"));
    assert!(prompt.contains("A2:fishing boat, cruise ship, ship"));
    // Same question, but the bare flavor spaces out its labels.
    assert!(p1_tail.starts_with("Q: "));
    assert!(prompt.lines().last().unwrap().starts_with("A:Here"));
}
