//! Synthetic movie-recommendation dialogues with a matching item graph and
//! word graph.
//!
//! Every synthetic user has a latent (genre, actor) taste. A dialogue opens
//! with greetings; the user then either states the genre (directly or through
//! a concept word linked to it in the word graph) together with a liked movie
//! starring the preferred actor, or stays vague. The agent recommends only
//! after a preference has been stated, so whether a turn recommends is
//! decidable from the history. Recommended items share the stated genre and,
//! when possible, the liked movie's actor; among those they are drawn by
//! popularity.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{weighted::WeightedIndex, Distribution};
use serde::{Deserialize, Serialize};

use super::corpus::{Catalog, CatalogEntry, Dialogue, Speaker, Turn};
use super::kg::RawTriple;
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    /// Split roughly 2:3 into genres and actors.
    pub n_attributes: usize,
    pub n_concepts: usize,
    pub n_dialogues: usize,
    /// Each round is one user turn followed by one agent turn.
    pub min_rounds: usize,
    pub max_rounds: usize,
    /// Chance that a user turn states the preference (and so that the next
    /// agent turn recommends).
    pub rec_turn_prob: f64,
    /// Chance that a preference statement names a liked movie.
    pub liked_item_prob: f64,
    /// Chance that the preference is phrased with a concept word.
    pub concept_prob: f64,
    /// Chance that a recommendation turn names two movies.
    pub multi_item_prob: f64,
    /// Zipf exponent of item popularity.
    pub popularity_skew: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_users: 300,
            n_items: 200,
            n_attributes: 20,
            n_concepts: 16,
            n_dialogues: 2000,
            min_rounds: 2,
            max_rounds: 3,
            rec_turn_prob: 0.8,
            liked_item_prob: 0.9,
            concept_prob: 0.4,
            multi_item_prob: 0.15,
            popularity_skew: 0.7,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_users", self.n_users),
            ("n_items", self.n_items),
            ("n_concepts", self.n_concepts),
            ("n_dialogues", self.n_dialogues),
            ("min_rounds", self.min_rounds),
        ] {
            if v == 0 {
                return invalid(format!("{name} must be at least 1"));
            }
        }
        if self.n_attributes < 2 {
            return invalid("n_attributes must be at least 2 (one genre and one actor)");
        }
        if self.max_rounds < self.min_rounds {
            return invalid("max_rounds < min_rounds");
        }
        for (name, p) in [
            ("rec_turn_prob", self.rec_turn_prob),
            ("liked_item_prob", self.liked_item_prob),
            ("concept_prob", self.concept_prob),
            ("multi_item_prob", self.multi_item_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return invalid(format!("{name} = {p} is not a probability"));
            }
        }
        if !(self.popularity_skew >= 0.0) {
            return invalid("popularity_skew must be non-negative");
        }
        Ok(())
    }

    pub fn n_genres(&self) -> usize {
        ((self.n_attributes as f64 * 0.4).round() as usize).clamp(1, self.n_attributes - 1)
    }

    pub fn n_actors(&self) -> usize {
        self.n_attributes - self.n_genres()
    }
}

/// Ground truth kept alongside each generated dialogue.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueTruth {
    pub user: usize,
    pub genre: String,
    pub liked: Option<String>,
    /// Gold item ids per agent turn index.
    pub gold: Vec<(usize, Vec<String>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub dialogues: Vec<Dialogue>,
    pub truth: Vec<DialogueTruth>,
    pub catalog: Catalog,
    pub item_triples: Vec<RawTriple>,
    pub word_triples: Vec<RawTriple>,
    /// Genre and actor of each item, by item index.
    pub item_genre: Vec<String>,
    pub item_actor: Vec<String>,
}

const GENRES: [&str; 12] = [
    "action", "comedy", "drama", "horror", "romance", "thriller", "scifi", "fantasy", "western", "musical", "mystery",
    "animation",
];

const CONCEPTS: [[&str; 2]; 12] = [
    ["explosions", "fights"],
    ["funny", "hilarious"],
    ["serious", "emotional"],
    ["scary", "creepy"],
    ["romantic", "sweet"],
    ["suspense", "tense"],
    ["space", "robots"],
    ["magic", "dragons"],
    ["cowboys", "outlaws"],
    ["songs", "dancing"],
    ["detective", "puzzling"],
    ["cartoon", "animated"],
];

const ACTORS: [&str; 16] = [
    "hanks", "streep", "pitt", "roberts", "washington", "blanchett", "depp", "kidman", "freeman", "winslet", "damon",
    "portman", "cruise", "theron", "ford", "bullock",
];

const ADJECTIVES: [&str; 20] = [
    "Silent", "Golden", "Broken", "Hidden", "Last", "Crimson", "Frozen", "Endless", "Wild", "Lost", "Bright", "Dark",
    "Hollow", "Iron", "Quiet", "Burning", "Distant", "Secret", "Velvet", "Fallen",
];

const NOUNS: [&str; 20] = [
    "River", "Empire", "Garden", "Storm", "Mirror", "Harbor", "Signal", "Crown", "Forest", "Machine", "Letter", "Bridge",
    "Horizon", "Shadow", "Island", "Promise", "Station", "Voyage", "Orchard", "Tower",
];

fn genre_name(i: usize) -> String {
    GENRES.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("genre{i}"))
}

fn actor_name(i: usize) -> String {
    ACTORS.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("actor{i}"))
}

fn concept_name(i: usize, n_genres: usize) -> String {
    let g = i % n_genres;
    let slot = i / n_genres;
    match (CONCEPTS.get(g), slot) {
        (Some(c), s) if s < 2 => c[s].to_string(),
        _ => format!("concept{i}"),
    }
}

fn title(i: usize) -> String {
    let a = ADJECTIVES[i % ADJECTIVES.len()];
    let n = NOUNS[(i / ADJECTIVES.len()) % NOUNS.len()];
    let round = i / (ADJECTIVES.len() * NOUNS.len());
    if round == 0 {
        format!("The {a} {n}")
    } else {
        format!("The {a} {n} {}", round + 1)
    }
}

pub fn item_id(i: usize) -> String {
    (1000 + i).to_string()
}

struct World {
    genre_of: Vec<usize>,
    actor_of: Vec<usize>,
    popularity: Vec<f64>,
    concepts_of: Vec<Vec<String>>,
}

fn say(turns: &mut Vec<Turn>, speaker: Speaker, text: String) {
    turns.push(Turn { speaker, text });
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, xs: &'a [T]) -> &'a T {
    xs.choose(rng).expect("nonempty template list")
}

fn weighted(rng: &mut ChaCha8Rng, items: &[usize], pop: &[f64]) -> usize {
    let w: Vec<f64> = items.iter().map(|&i| pop[i]).collect();
    items[WeightedIndex::new(&w).expect("positive weights").sample(rng)]
}

fn mention(i: usize) -> String {
    format!("@{}", item_id(i))
}

pub fn generate_synthetic_corpus(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (ng, na) = (cfg.n_genres(), cfg.n_actors());

    let genre_of: Vec<usize> = (0..cfg.n_items).map(|i| if i < ng { i } else { rng.random_range(0..ng) }).collect();
    let actor_of: Vec<usize> = (0..cfg.n_items).map(|i| if i < na { i } else { rng.random_range(0..na) }).collect();
    let mut ranks: Vec<usize> = (0..cfg.n_items).collect();
    ranks.shuffle(&mut rng);
    let popularity: Vec<f64> = ranks.iter().map(|&r| 1.0 / ((r + 1) as f64).powf(cfg.popularity_skew)).collect();
    let mut concepts_of = vec![Vec::new(); ng];
    for c in 0..cfg.n_concepts {
        concepts_of[c % ng].push(concept_name(c, ng));
    }
    let world = World {
        genre_of,
        actor_of,
        popularity,
        concepts_of,
    };

    let catalog = Catalog::new(
        (0..cfg.n_items)
            .map(|i| CatalogEntry {
                id: item_id(i),
                title: title(i),
            })
            .collect(),
    )?;
    let mut item_triples = Vec::new();
    for i in 0..cfg.n_items {
        item_triples.push(RawTriple::new(item_id(i), "genre", genre_name(world.genre_of[i])));
        item_triples.push(RawTriple::new(item_id(i), "actor", actor_name(world.actor_of[i])));
    }
    let mut word_triples = Vec::new();
    for (g, cs) in world.concepts_of.iter().enumerate() {
        for c in cs {
            word_triples.push(RawTriple::new(c.clone(), "related_to", genre_name(g)));
        }
    }

    // latent tastes come from real (genre, actor) pairs so a matching item exists
    let all: Vec<usize> = (0..cfg.n_items).collect();
    let users: Vec<(usize, usize)> = (0..cfg.n_users)
        .map(|_| {
            let i = weighted(&mut rng, &all, &world.popularity);
            (world.genre_of[i], world.actor_of[i])
        })
        .collect();

    let mut dialogues = Vec::with_capacity(cfg.n_dialogues);
    let mut truth = Vec::with_capacity(cfg.n_dialogues);
    for d in 0..cfg.n_dialogues {
        let user = rng.random_range(0..cfg.n_users);
        let (dl, tr) = one_dialogue(cfg, &world, users[user], user, d, &mut rng);
        dialogues.push(dl);
        truth.push(tr);
    }

    Ok(SyntheticCorpus {
        dialogues,
        truth,
        catalog,
        item_triples,
        word_triples,
        item_genre: world.genre_of.iter().map(|&g| genre_name(g)).collect(),
        item_actor: world.actor_of.iter().map(|&a| actor_name(a)).collect(),
    })
}

fn one_dialogue(
    cfg: &SyntheticConfig,
    w: &World,
    (genre, actor): (usize, usize),
    user: usize,
    index: usize,
    rng: &mut ChaCha8Rng,
) -> (Dialogue, DialogueTruth) {
    let gname = genre_name(genre);
    let mut turns = Vec::new();

    say(&mut turns, Speaker::User, pick(rng, &["hi !", "hello there .", "hey , i need a movie .", "hi , can you help me ?"]).to_string());
    say(&mut turns, Speaker::Agent,
        pick(rng, &["hello ! what are you in the mood for ?", "hi ! what kind of movies do you like ?"]).to_string(),
    );

    let rounds = rng.random_range(cfg.min_rounds..=cfg.max_rounds);
    let mut stated = false;
    let mut liked: Option<usize> = None;
    let mut shown: Vec<usize> = Vec::new();
    let mut gold = Vec::new();
    for r in 0..rounds {
        // user turn
        if !stated && rng.random_bool(cfg.rec_turn_prob) {
            stated = true;
            let pref = if rng.random_bool(cfg.concept_prob) && !w.concepts_of[genre].is_empty() {
                let c = pick(rng, &w.concepts_of[genre]).clone();
                match rng.random_range(0..2) {
                    0 => format!("something {c} please ."),
                    _ => format!("i want a {c} movie ."),
                }
            } else {
                match rng.random_range(0..3) {
                    0 => format!("i like {gname} movies ."),
                    1 => format!("i am into {gname} films ."),
                    _ => format!("i really enjoy {gname} ."),
                }
            };
            let text = if rng.random_bool(cfg.liked_item_prob) {
                let pool: Vec<usize> = (0..w.actor_of.len()).filter(|&i| w.actor_of[i] == actor).collect();
                let m = weighted(rng, &pool, &w.popularity);
                liked = Some(m);
                shown.push(m);
                match rng.random_range(0..2) {
                    0 => format!("{pref} i loved {} .", mention(m)),
                    _ => format!("{pref} my favorite is {} .", mention(m)),
                }
            } else {
                pref
            };
            say(&mut turns, Speaker::User, text);
        } else if stated {
            say(&mut turns, Speaker::User,
                pick(rng, &["i have seen that one . anything else ?", "sounds good ! any other ideas ?", "nice , what else ?"])
                    .to_string(),
            );
        } else {
            say(&mut turns, Speaker::User, pick(rng, &["i am not sure .", "anything is fine .", "hmm , i do not know ."]).to_string());
        }

        // agent turn
        let agent_turn = turns.len();
        if stated {
            let n = if rng.random_bool(cfg.multi_item_prob) { 2 } else { 1 };
            let mut picks = Vec::new();
            for _ in 0..n {
                if let Some(i) = choose_gold(w, genre, liked.map(|m| w.actor_of[m]), &shown, rng) {
                    picks.push(i);
                    shown.push(i);
                }
            }
            let text = match picks.as_slice() {
                [] => "sorry , i am out of ideas .".to_string(),
                [a] => match rng.random_range(0..4) {
                    0 => format!("you should watch {} .", mention(*a)),
                    1 => format!("have you seen {} ? it is a great {gname} movie .", mention(*a)),
                    2 => format!("i think you would like {} .", mention(*a)),
                    _ => format!("how about {} ?", mention(*a)),
                },
                [a, b, ..] => format!("you might like {} or {} .", mention(*a), mention(*b)),
            };
            if !picks.is_empty() {
                gold.push((agent_turn, picks.iter().map(|&i| item_id(i)).collect()));
            }
            say(&mut turns, Speaker::Agent, text);
        } else {
            let q = if r == 0 {
                pick(rng, &["which genre do you enjoy ?", "tell me more about your taste ."])
            } else {
                pick(rng, &["what kind of movies do you like ?", "any genre you prefer ?"])
            };
            say(&mut turns, Speaker::Agent, q.to_string());
        }
    }
    say(&mut turns, Speaker::User, pick(rng, &["thanks , bye !", "great , thank you !"]).to_string());
    say(&mut turns, Speaker::Agent, pick(rng, &["enjoy the movie !", "you are welcome , bye !"]).to_string());

    (
        Dialogue {
            id: format!("syn-{index}"),
            turns,
        },
        DialogueTruth {
            user,
            genre: gname,
            liked: liked.map(item_id),
            gold,
        },
    )
}

/// Items of the stated genre starring the liked movie's actor; falling back to
/// the genre alone.
fn choose_gold(w: &World, genre: usize, actor: Option<usize>, shown: &[usize], rng: &mut ChaCha8Rng) -> Option<usize> {
    let fresh = |i: &usize| !shown.contains(i);
    let n = w.genre_of.len();
    if let Some(a) = actor {
        let both: Vec<usize> = (0..n).filter(|&i| w.genre_of[i] == genre && w.actor_of[i] == a).filter(fresh).collect();
        if !both.is_empty() {
            return Some(weighted(rng, &both, &w.popularity));
        }
    }
    let by_genre: Vec<usize> = (0..n).filter(|&i| w.genre_of[i] == genre).filter(fresh).collect();
    if by_genre.is_empty() {
        None
    } else {
        Some(weighted(rng, &by_genre, &w.popularity))
    }
}
