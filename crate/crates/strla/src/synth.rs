//! Offline generators for the synthetic benchmark datasets.
//!
//! Car evaluation and nursery are deterministic hierarchical rule models over
//! their full attribute grids; poker hands are random 5-card deals labeled by
//! standard hand ranking. The rule tables below were reconstructed to
//! reproduce the published class distributions of the originals exactly
//! (car: 1210/384/69/65; nursery: 4320/2/328/4266/4044), which the unit tests
//! pin down.

use crate::data::Table;
use crate::stree::Element;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Car evaluation
// ---------------------------------------------------------------------------

const BUYING: [&str; 4] = ["vhigh", "high", "med", "low"];
const DOORS: [&str; 4] = ["2", "3", "4", "5more"];
const PERSONS: [&str; 3] = ["2", "4", "more"];
const LUG_BOOT: [&str; 3] = ["small", "med", "big"];
const SAFETY: [&str; 3] = ["low", "med", "high"];

/// Goodness-indexed price aggregate (0 = worst) over buying and maintenance.
const PRICE_TABLE: [[usize; 4]; 4] =
    [[0, 0, 1, 2], [0, 1, 2, 2], [1, 2, 2, 3], [2, 2, 3, 3]];

/// Technology aggregate over (comfort, safety - 1); safety `low` is handled
/// upstream as outright unacceptable.
const TECH_TABLE: [[usize; 2]; 3] = [[0, 1], [0, 2], [2, 3]];

/// Final acceptability over (price, tech).
const CAR_TABLE: [[&str; 4]; 4] = [
    ["unacc", "unacc", "acc", "acc"],
    ["unacc", "acc", "acc", "vgood"],
    ["unacc", "acc", "acc", "vgood"],
    ["acc", "acc", "good", "vgood"],
];

fn car_class(gb: usize, gm: usize, gd: usize, gp: usize, gl: usize, gs: usize) -> &'static str {
    if gp == 0 || gs == 0 {
        return "unacc";
    }
    let price = PRICE_TABLE[gb][gm];
    let wd = [0, 1, 1, 2][gd];
    let wp = [0, 1][gp - 1];
    let wl = [0, 1, 2][gl];
    let score = wd + wp + wl;
    let comfort = if score < 1 {
        0
    } else if score < 4 {
        1
    } else {
        2
    };
    let tech = TECH_TABLE[comfort][gs - 1];
    CAR_TABLE[price][tech]
}

/// The 1728-row car-evaluation table, enumerated in attribute order.
pub fn gen_car() -> Table {
    let headers = ["buying", "maint", "doors", "persons", "lug_boot", "safety", "class"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::with_capacity(1728);
    for (bi, buying) in BUYING.iter().enumerate() {
        for (mi, maint) in BUYING.iter().enumerate() {
            for (di, doors) in DOORS.iter().enumerate() {
                for (pi, persons) in PERSONS.iter().enumerate() {
                    for (li, lug) in LUG_BOOT.iter().enumerate() {
                        for (si, safety) in SAFETY.iter().enumerate() {
                            // listed orders run best→worst for price columns
                            // and worst→best for the rest
                            let class = car_class(3 - bi, 3 - mi, di, pi, li, si);
                            rows.push(vec![
                                buying.to_string(),
                                maint.to_string(),
                                doors.to_string(),
                                persons.to_string(),
                                lug.to_string(),
                                safety.to_string(),
                                class.to_string(),
                            ]);
                        }
                    }
                }
            }
        }
    }
    Table::new(headers, rows).expect("generated rows are rectangular")
}

// ---------------------------------------------------------------------------
// Nursery
// ---------------------------------------------------------------------------

const PARENTS: [&str; 3] = ["usual", "pretentious", "great_pret"];
const HAS_NURS: [&str; 5] = ["proper", "less_proper", "improper", "critical", "very_crit"];
const FORM: [&str; 4] = ["complete", "completed", "incomplete", "foster"];
const CHILDREN: [&str; 4] = ["1", "2", "3", "more"];
const HOUSING: [&str; 3] = ["convenient", "less_conv", "critical"];
const FINANCE: [&str; 2] = ["convenient", "inconv"];
const SOCIAL: [&str; 3] = ["nonprob", "slightly_prob", "problematic"];
const HEALTH: [&str; 3] = ["recommended", "priority", "not_recom"];

/// Class membership thresholds on the social/health aggregate, indexed by
/// (employment, structure+finance): class holds when soc-health >= cell.
const T_RECOMMEND: [[usize; 3]; 3] = [[3, 3, 3], [3, 3, 3], [3, 3, 2]];
const T_VERY_RECOM: [[usize; 3]; 3] = [[3, 3, 2], [3, 3, 2], [3, 1, 0]];
const T_PRIORITY: [[usize; 3]; 3] = [[3, 1, 1], [3, 1, 1], [2, 0, 0]];

fn nursery_class(
    gp: usize,
    gn: usize,
    gf: usize,
    gc: usize,
    gh: usize,
    gfin: usize,
    gs: usize,
    ghe: isize,
) -> &'static str {
    if ghe < 0 {
        return "not_recom";
    }
    let ghe = ghe as usize;
    let employ = if gn == 0 {
        0
    } else if gp == 2 && gn == 4 {
        2
    } else {
        1
    };
    let structure = if gf == 0 && gc == 0 {
        0
    } else if gf >= 2 && gc == 3 {
        2
    } else {
        1
    };
    let struct_finan = structure.min(gh).min(gfin + 1);
    let soc_health = if gs == 0 && ghe == 0 {
        0
    } else if gs == 2 && ghe == 1 {
        2
    } else {
        1
    };
    if soc_health >= T_RECOMMEND[employ][struct_finan] {
        "recommend"
    } else if soc_health >= T_VERY_RECOM[employ][struct_finan] {
        "very_recom"
    } else if soc_health >= T_PRIORITY[employ][struct_finan] {
        "priority"
    } else {
        "spec_prior"
    }
}

/// The 12960-row nursery table, enumerated in attribute order.
pub fn gen_nursery() -> Table {
    let headers = [
        "parents", "has_nurs", "form", "children", "housing", "finance", "social", "health",
        "class",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut rows = Vec::with_capacity(12960);
    for (pi, parents) in PARENTS.iter().enumerate() {
        for (ni, has_nurs) in HAS_NURS.iter().enumerate() {
            for (fi, form) in FORM.iter().enumerate() {
                for (ci, children) in CHILDREN.iter().enumerate() {
                    for (hi, housing) in HOUSING.iter().enumerate() {
                        for (fin_i, finance) in FINANCE.iter().enumerate() {
                            for (si, social) in SOCIAL.iter().enumerate() {
                                for (hei, health) in HEALTH.iter().enumerate() {
                                    // listed orders run best→worst
                                    let ghe: isize = match hei {
                                        0 => 1,  // recommended
                                        1 => 0,  // priority
                                        _ => -1, // not_recom
                                    };
                                    let class = nursery_class(
                                        2 - pi,
                                        4 - ni,
                                        3 - fi,
                                        3 - ci,
                                        2 - hi,
                                        1 - fin_i,
                                        2 - si,
                                        ghe,
                                    );
                                    rows.push(vec![
                                        parents.to_string(),
                                        has_nurs.to_string(),
                                        form.to_string(),
                                        children.to_string(),
                                        housing.to_string(),
                                        finance.to_string(),
                                        social.to_string(),
                                        health.to_string(),
                                        class.to_string(),
                                    ]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Table::new(headers, rows).expect("generated rows are rectangular")
}

// ---------------------------------------------------------------------------
// Poker hands
// ---------------------------------------------------------------------------

/// Standard poker-hand class of five (suit 1-4, rank 1-13) cards:
/// 0 nothing, 1 one pair, 2 two pairs, 3 three of a kind, 4 straight,
/// 5 flush, 6 full house, 7 four of a kind, 8 straight flush, 9 royal flush.
pub fn poker_hand_class(cards: &[(u8, u8); 5]) -> u8 {
    let flush = cards.iter().all(|(s, _)| *s == cards[0].0);
    let mut ranks: Vec<u8> = cards.iter().map(|(_, r)| *r).collect();
    ranks.sort_unstable();
    let distinct = {
        let mut d = ranks.clone();
        d.dedup();
        d
    };
    let straight = distinct.len() == 5
        && (ranks[4] - ranks[0] == 4 || ranks == [1, 10, 11, 12, 13]);
    let ace_high_straight = ranks == [1, 10, 11, 12, 13];

    let mut counts = [0u8; 14];
    for &r in &ranks {
        counts[r as usize] += 1;
    }
    let mut pairs = 0;
    let mut trips = 0;
    let mut quads = 0;
    for &c in &counts {
        match c {
            2 => pairs += 1,
            3 => trips += 1,
            4 => quads += 1,
            _ => {}
        }
    }

    if straight && flush && ace_high_straight {
        9
    } else if straight && flush {
        8
    } else if quads == 1 {
        7
    } else if trips == 1 && pairs == 1 {
        6
    } else if flush {
        5
    } else if straight {
        4
    } else if trips == 1 {
        3
    } else if pairs == 2 {
        2
    } else if pairs == 1 {
        1
    } else {
        0
    }
}

fn deal(rng: &mut ChaCha8Rng) -> [(u8, u8); 5] {
    let mut deck: Vec<(u8, u8)> =
        (1..=4u8).flat_map(|s| (1..=13u8).map(move |r| (s, r))).collect();
    deck.shuffle(rng);
    [deck[0], deck[1], deck[2], deck[3], deck[4]]
}

fn rare_hand(rng: &mut ChaCha8Rng, royal: bool) -> [(u8, u8); 5] {
    let suit = rng.gen_range(1..=4u8);
    let start = if royal { 0 } else { rng.gen_range(1..=9u8) };
    // start 0 encodes the ace-high run 10-J-Q-K-A
    let mut ranks: Vec<u8> = if start == 0 {
        vec![10, 11, 12, 13, 1]
    } else {
        (start..start + 5).collect()
    };
    ranks.shuffle(rng);
    let mut out = [(0u8, 0u8); 5];
    for (slot, r) in out.iter_mut().zip(ranks) {
        *slot = (suit, r);
    }
    out
}

fn hand_row(cards: &[(u8, u8); 5]) -> Vec<String> {
    let mut row = Vec::with_capacity(11);
    for (s, r) in cards {
        row.push(s.to_string());
        row.push(r.to_string());
    }
    row.push(poker_hand_class(cards).to_string());
    row
}

/// Random poker-hand deals as a table (S1,C1,...,S5,C5,CLASS). With
/// `top_up_rare`, straight-flush and royal-flush hands are injected until
/// each has at least five rows, matching the visible composition of the
/// original 25010-hand training set.
pub fn gen_poker(n: usize, seed: u64, top_up_rare: bool) -> Table {
    let headers = ["S1", "C1", "S2", "C2", "S3", "C3", "S4", "C4", "S5", "C5", "CLASS"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x504f_4b45); // "POKE"
    let mut hands: Vec<[(u8, u8); 5]> = (0..n).map(|_| deal(&mut rng)).collect();
    if top_up_rare {
        for class in [8u8, 9u8] {
            loop {
                let have =
                    hands.iter().filter(|h| poker_hand_class(h) == class).count();
                if have >= 5 || have >= n {
                    break;
                }
                // overwrite a random plain hand
                let idx = rng.gen_range(0..hands.len());
                if poker_hand_class(&hands[idx]) == 0 {
                    hands[idx] = rare_hand(&mut rng, class == 9);
                }
            }
        }
    }
    let rows = hands.iter().map(hand_row).collect();
    Table::new(headers, rows).expect("generated rows are rectangular")
}

// ---------------------------------------------------------------------------
// Random documents
// ---------------------------------------------------------------------------

const WORDS: [&str; 10] =
    ["alpha", "beta", "gamma", "delta", "kappa", "omega", "note", "x1", "v2", "zz"];

fn random_element(rng: &mut ChaCha8Rng, depth: usize, max_fanout: usize) -> Element {
    let leaf = depth == 0 || rng.gen_bool(0.4);
    if leaf {
        match rng.gen_range(0..3) {
            0 => Element::number(rng.gen_range(-5.0..5.0)),
            1 => Element::text(WORDS[rng.gen_range(0..WORDS.len())]),
            _ => Element::boolean(match rng.gen_range(0..3) {
                0 => Some(true),
                1 => Some(false),
                _ => None,
            }),
        }
    } else {
        let fanout = rng.gen_range(0..=max_fanout);
        if rng.gen_bool(0.5) {
            Element::array(
                (0..fanout).map(|_| random_element(rng, depth - 1, max_fanout)).collect(),
            )
        } else {
            Element::object(
                (0..fanout)
                    .map(|_| {
                        (
                            WORDS[rng.gen_range(0..WORDS.len())].to_string(),
                            random_element(rng, depth - 1, max_fanout),
                        )
                    })
                    .collect(),
            )
        }
    }
}

/// Seed-deterministic random document (all five element kinds possible).
pub fn gen_random_document(seed: u64, max_depth: usize, max_fanout: usize) -> Element {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x444f_4321); // "DOC!"
    // force a container root so there is structure to walk
    let fanout = rng.gen_range(1..=max_fanout);
    Element::object(
        (0..fanout)
            .map(|i| {
                (
                    format!("{}{i}", WORDS[rng.gen_range(0..WORDS.len())]),
                    random_element(&mut rng, max_depth.saturating_sub(1), max_fanout),
                )
            })
            .collect(),
    )
}

/// A corpus of documents guaranteed to exercise all five element kinds.
pub fn gen_corpus(n: usize, seed: u64, max_depth: usize, max_fanout: usize) -> Vec<Element> {
    assert!(n >= 1);
    let mut docs: Vec<Element> = (0..n.saturating_sub(1) as u64)
        .map(|i| gen_random_document(seed.wrapping_add(i), max_depth, max_fanout))
        .collect();
    // make coverage of every kind unconditional
    docs.push(
        crate::stree::parse_json(
            r#"{"num": 1.5, "txt": "abc", "flag": true, "none": null, "arr": [1, "b", false], "obj": {"k": 2}}"#,
        )
        .unwrap(),
    );
    docs
}
