//! MiniShop: a graded-reward shopping world.
//!
//! A seeded catalog of products backs search/click navigation. Purchasing
//! scores (matched attributes + matched options + price ok) over
//! (required attributes + required options + 1): a graded reward in [0,1]
//! that reaches 1.0 exactly when every requirement is met.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ActionOutcome, EnvError, EnvObservation, Environment, OracleMode, THINK_ACTION};
use crate::trajectory::TaskSpec;

const CATEGORIES: [&str; 6] = ["bottle", "lamp", "speaker", "backpack", "kettle", "notebook"];
const ATTRIBUTES: [&str; 12] = [
    "portable",
    "wireless",
    "insulated",
    "compact",
    "rustic",
    "modern",
    "waterproof",
    "organic",
    "foldable",
    "ceramic",
    "leather",
    "bamboo",
];
const COLOR_VALUES: [&str; 5] = ["black", "white", "blue", "red", "green"];
const SIZE_VALUES: [&str; 4] = ["small", "medium", "large", "extra large"];
const RESULT_CAP: usize = 12;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MiniShopConfig {
    /// Products in the shared catalog.
    pub catalog_size: usize,
    /// Products listed per results page.
    pub page_size: usize,
    /// Attributes a task requires (drawn from the target product).
    pub required_attributes: usize,
    /// Options a task requires (drawn from the target product).
    pub required_options: usize,
    /// Seed of the shared catalog; tasks reference it.
    pub catalog_seed: u64,
    /// Episode step budget; truncation forces reward 0.
    pub max_steps: u32,
}

impl Default for MiniShopConfig {
    fn default() -> Self {
        Self {
            catalog_size: 24,
            page_size: 3,
            required_attributes: 2,
            required_options: 1,
            catalog_seed: 1,
            max_steps: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Product {
    pub product_id: String,
    pub title: String,
    pub category: &'static str,
    pub attributes: Vec<String>,
    pub options: BTreeMap<String, Vec<String>>,
    pub price: f64,
}

impl Product {
    fn terms(&self) -> Vec<String> {
        let mut t: Vec<String> = self
            .title
            .split_whitespace()
            .map(|w| w.to_lowercase())
            .collect();
        t.push(self.category.to_string());
        t.extend(self.attributes.iter().cloned());
        t.sort();
        t.dedup();
        t
    }
}

#[derive(Debug, Clone)]
pub struct Catalog {
    pub products: Vec<Product>,
}

impl Catalog {
    pub fn generate(cfg: &MiniShopConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.catalog_seed);
        let products = (0..cfg.catalog_size.max(2))
            .map(|i| {
                let category = CATEGORIES[rng.gen_range(0..CATEGORIES.len())];
                let mut attrs: Vec<&str> = ATTRIBUTES.to_vec();
                attrs.shuffle(&mut rng);
                let attributes: Vec<String> =
                    attrs[..3].iter().map(|a| a.to_string()).collect();
                let title = format!("{} {} {}", attributes[0], attributes[1], category);

                let mut options = BTreeMap::new();
                let mut colors: Vec<&str> = COLOR_VALUES.to_vec();
                colors.shuffle(&mut rng);
                let n_colors = rng.gen_range(3..=colors.len());
                let mut chosen_colors: Vec<String> =
                    colors[..n_colors].iter().map(|s| s.to_string()).collect();
                chosen_colors.sort();
                options.insert("color".to_string(), chosen_colors);
                let mut sizes: Vec<&str> = SIZE_VALUES.to_vec();
                sizes.shuffle(&mut rng);
                let n_sizes = rng.gen_range(2..=sizes.len());
                let mut chosen_sizes: Vec<String> =
                    sizes[..n_sizes].iter().map(|s| s.to_string()).collect();
                chosen_sizes.sort();
                options.insert("size".to_string(), chosen_sizes);

                Product {
                    product_id: format!("P{i:03}"),
                    title,
                    category,
                    attributes,
                    options,
                    price: rng.gen_range(500..10_000) as f64 / 100.0,
                }
            })
            .collect();
        Self { products }
    }

    /// Rank products by overlap with the query terms; score desc, id asc.
    fn search(&self, query: &str) -> Vec<usize> {
        let terms: Vec<String> = query.split_whitespace().map(|w| w.to_lowercase()).collect();
        let mut scored: Vec<(usize, usize)> = self
            .products
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let pt = p.terms();
                let score = terms.iter().filter(|t| pt.contains(*t)).count();
                (i, score)
            })
            .filter(|(_, s)| *s > 0)
            .collect();
        scored.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.into_iter().take(RESULT_CAP).map(|(i, _)| i).collect()
    }
}

/// A task's purchase requirements.
#[derive(Debug, Clone, PartialEq)]
struct Requirements {
    target: usize,
    attributes: Vec<String>,
    options: BTreeMap<String, String>,
    price_cap: f64,
}

impl Requirements {
    fn generate(cfg: &MiniShopConfig, catalog: &Catalog, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
        let target = rng.gen_range(0..catalog.products.len());
        let product = &catalog.products[target];
        let mut attrs = product.attributes.clone();
        attrs.shuffle(&mut rng);
        attrs.truncate(cfg.required_attributes.min(attrs.len()));
        let mut option_names: Vec<&String> = product.options.keys().collect();
        option_names.shuffle(&mut rng);
        let options: BTreeMap<String, String> = option_names
            .into_iter()
            .take(cfg.required_options.min(product.options.len()))
            .map(|name| {
                let values = &product.options[name];
                (name.clone(), values[rng.gen_range(0..values.len())].clone())
            })
            .collect();
        let price_cap = (product.price + rng.gen_range(500..3000) as f64 / 100.0).ceil();
        Self {
            target,
            attributes: attrs,
            options,
            price_cap,
        }
    }

    fn goal_text(&self, catalog: &Catalog) -> String {
        let product = &catalog.products[self.target];
        let mut text = format!(
            "i need a {} {}",
            self.attributes.join(" "),
            product.category
        );
        for (name, value) in &self.options {
            text.push_str(&format!(" with {value} {name}"));
        }
        text.push_str(&format!(
            ", and price lower than {:.2} dollars",
            self.price_cap
        ));
        text
    }

    fn queries(&self, catalog: &Catalog) -> Vec<String> {
        let category = catalog.products[self.target].category;
        vec![
            format!("{} {}", self.attributes.join(" "), category),
            category.to_string(),
        ]
    }

    /// The graded purchase score.
    fn reward(
        &self,
        catalog: &Catalog,
        bought: usize,
        selections: &BTreeMap<String, String>,
    ) -> f64 {
        let product = &catalog.products[bought];
        let matched_attrs = self
            .attributes
            .iter()
            .filter(|a| product.attributes.contains(a))
            .count();
        let matched_opts = self
            .options
            .iter()
            .filter(|(name, value)| selections.get(*name) == Some(value))
            .count();
        let price_ok = usize::from(product.price <= self.price_cap);
        let denom = self.attributes.len() + self.options.len() + 1;
        (matched_attrs + matched_opts + price_ok) as f64 / denom as f64
    }
}

/// Goal text and task type for a layout seed, used at task-generation time.
pub(super) fn describe_task(cfg: &MiniShopConfig, seed: u64) -> (String, String) {
    let catalog = Catalog::generate(cfg);
    let req = Requirements::generate(cfg, &catalog, seed);
    let category = catalog.products[req.target].category.to_string();
    (req.goal_text(&catalog), category)
}

#[derive(Debug, Clone, PartialEq)]
enum Page {
    Search,
    Results { ranked: Vec<usize>, page: usize },
    Product { idx: usize, ranked: Vec<usize>, page: usize },
}

#[derive(Debug, Clone)]
pub struct MiniShop {
    cfg: MiniShopConfig,
    catalog: Catalog,
    req: Option<Requirements>,
    page: Page,
    selections: BTreeMap<String, String>,
    steps_taken: u32,
    terminal: bool,
}

impl MiniShop {
    pub fn new(cfg: MiniShopConfig) -> Self {
        let catalog = Catalog::generate(&cfg);
        Self {
            cfg,
            catalog,
            req: None,
            page: Page::Search,
            selections: BTreeMap::new(),
            steps_taken: 0,
            terminal: false,
        }
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    fn req(&self) -> &Requirements {
        self.req.as_ref().expect("environment was reset")
    }

    fn search_page_text(&self) -> String {
        format!(
            "MiniShop\nInstruction: {}\n[Search]",
            self.req().goal_text(&self.catalog)
        )
    }

    fn results_text(&self, ranked: &[usize], page: usize) -> String {
        let total = ranked.len();
        let pages = total.div_ceil(self.cfg.page_size).max(1);
        let mut text = format!("[Back to Search]\nPage {} (Total results: {})", page + 1, total);
        if page > 0 {
            text.push_str("\n[< Prev]");
        }
        if page + 1 < pages {
            text.push_str("\n[Next >]");
        }
        for &i in visible(ranked, page, self.cfg.page_size) {
            let p = &self.catalog.products[i];
            text.push_str(&format!("\n[{}]\n{}\n${:.2}", p.product_id, p.title, p.price));
        }
        text
    }

    fn product_text(&self, idx: usize) -> String {
        let p = &self.catalog.products[idx];
        let mut text = format!("[Back to Search]\n[< Prev]\n[{}]", p.product_id);
        for (name, values) in &p.options {
            let rendered: Vec<String> = values.iter().map(|v| format!("[{v}]")).collect();
            text.push_str(&format!("\n{} {}", name, rendered.join("")));
        }
        text.push_str(&format!("\n{}\nPrice: ${:.2}\n[Buy Now]", p.title, p.price));
        text
    }

    fn apply(&mut self, action: &str) -> (String, bool, Option<f64>) {
        // Returns (observation text, valid, terminal reward).
        if action.starts_with("think[") && action.ends_with(']') {
            return ("OK.".into(), true, None);
        }
        if let Some(query) = action.strip_prefix("search[").and_then(|r| r.strip_suffix(']')) {
            if self.page == Page::Search {
                let ranked = self.catalog.search(query);
                let text = self.results_text(&ranked, 0);
                self.page = Page::Results { ranked, page: 0 };
                return (text, true, None);
            }
            return ("Invalid action.".into(), false, None);
        }
        let Some(arg) = action.strip_prefix("click[").and_then(|r| r.strip_suffix(']')) else {
            return ("Invalid action.".into(), false, None);
        };
        match arg {
            "Back to Search" => {
                if matches!(self.page, Page::Results { .. } | Page::Product { .. }) {
                    self.page = Page::Search;
                    return (self.search_page_text(), true, None);
                }
            }
            "Next >" => {
                if let Page::Results { ranked, page } = &self.page {
                    let pages = ranked.len().div_ceil(self.cfg.page_size).max(1);
                    if page + 1 < pages {
                        let (ranked, page) = (ranked.clone(), page + 1);
                        let text = self.results_text(&ranked, page);
                        self.page = Page::Results { ranked, page };
                        return (text, true, None);
                    }
                }
            }
            "< Prev" => match &self.page {
                Page::Results { ranked, page } if *page > 0 => {
                    let (ranked, page) = (ranked.clone(), page - 1);
                    let text = self.results_text(&ranked, page);
                    self.page = Page::Results { ranked, page };
                    return (text, true, None);
                }
                Page::Product { ranked, page, .. } => {
                    let (ranked, page) = (ranked.clone(), *page);
                    let text = self.results_text(&ranked, page);
                    self.page = Page::Results { ranked, page };
                    return (text, true, None);
                }
                _ => {}
            },
            "Buy Now" => {
                if let Page::Product { idx, .. } = self.page {
                    let reward = self.req().reward(&self.catalog, idx, &self.selections);
                    return ("Your purchase is complete.".into(), true, Some(reward));
                }
            }
            _ => {
                if let Page::Results { ranked, page } = &self.page {
                    if let Some(&idx) = visible(ranked, *page, self.cfg.page_size)
                        .iter()
                        .find(|&&i| self.catalog.products[i].product_id == arg)
                    {
                        let (ranked, page) = (ranked.clone(), *page);
                        let text = self.product_text(idx);
                        self.page = Page::Product { idx, ranked, page };
                        self.selections.clear();
                        return (text, true, None);
                    }
                }
                if let Page::Product { idx, .. } = self.page {
                    let product = &self.catalog.products[idx];
                    let owner = product
                        .options
                        .iter()
                        .find(|(_, values)| values.iter().any(|v| v == arg))
                        .map(|(name, _)| name.clone());
                    if let Some(name) = owner {
                        self.selections.insert(name, arg.to_string());
                        return (format!("You have clicked {arg}."), true, None);
                    }
                }
            }
        }
        ("Invalid action.".into(), false, None)
    }
}

fn visible(ranked: &[usize], page: usize, page_size: usize) -> &[usize] {
    let start = (page * page_size).min(ranked.len());
    let end = (start + page_size).min(ranked.len());
    &ranked[start..end]
}

impl Environment for MiniShop {
    fn reset(&mut self, task: &TaskSpec, layout_seed: u64) -> Result<EnvObservation, EnvError> {
        if task.env_id != "mini_shop" {
            return Err(EnvError::TaskMismatch {
                task_id: task.task_id.clone(),
                env_id: task.env_id.clone(),
            });
        }
        let req = Requirements::generate(&self.cfg, &self.catalog, layout_seed);
        if req.goal_text(&self.catalog) != task.goal_text {
            return Err(EnvError::GoalDrift {
                task_id: task.task_id.clone(),
            });
        }
        self.req = Some(req);
        self.page = Page::Search;
        self.selections.clear();
        self.steps_taken = 0;
        self.terminal = false;
        Ok(EnvObservation::ongoing(self.search_page_text()))
    }

    fn step(&mut self, action_text: &str) -> Result<ActionOutcome, EnvError> {
        if self.req.is_none() {
            return Err(EnvError::NotReset);
        }
        if self.terminal {
            return Err(EnvError::EpisodeOver);
        }
        self.steps_taken += 1;
        let (text, valid, reward) = self.apply(action_text);
        if let Some(r) = reward {
            self.terminal = true;
            return Ok(ActionOutcome {
                observation: EnvObservation::terminal(text, r),
                action_valid: valid,
            });
        }
        if self.steps_taken >= self.cfg.max_steps {
            self.terminal = true;
            return Ok(ActionOutcome {
                observation: EnvObservation::terminal("Time is up.", 0.0),
                action_valid: valid,
            });
        }
        Ok(ActionOutcome {
            observation: EnvObservation::ongoing(text),
            action_valid: valid,
        })
    }

    fn action_space(&self) -> Vec<String> {
        if self.terminal || self.req.is_none() {
            return Vec::new();
        }
        let mut actions = Vec::new();
        match &self.page {
            Page::Search => {
                for q in self.req().queries(&self.catalog) {
                    actions.push(format!("search[{q}]"));
                }
            }
            Page::Results { ranked, page } => {
                for &i in visible(ranked, *page, self.cfg.page_size) {
                    actions.push(format!("click[{}]", self.catalog.products[i].product_id));
                }
                let pages = ranked.len().div_ceil(self.cfg.page_size).max(1);
                if page + 1 < pages {
                    actions.push("click[Next >]".into());
                }
                if *page > 0 {
                    actions.push("click[< Prev]".into());
                }
                actions.push("click[Back to Search]".into());
            }
            Page::Product { idx, .. } => {
                for values in self.catalog.products[*idx].options.values() {
                    for v in values {
                        actions.push(format!("click[{v}]"));
                    }
                }
                actions.push("click[Buy Now]".into());
                actions.push("click[< Prev]".into());
                actions.push("click[Back to Search]".into());
            }
        }
        actions.push(THINK_ACTION.to_string());
        actions
    }

    fn is_terminal(&self) -> bool {
        self.terminal
    }

    fn oracle_action(&self, mode: OracleMode) -> Option<String> {
        if self.terminal || self.req.is_none() {
            return None;
        }
        let req = self.req();
        match (&self.page, mode) {
            (Page::Search, _) => Some(format!("search[{}]", req.queries(&self.catalog)[0])),
            (Page::Results { ranked, page }, OracleMode::Perfect) => {
                let vis = visible(ranked, *page, self.cfg.page_size);
                if vis.contains(&req.target) {
                    Some(format!(
                        "click[{}]",
                        self.catalog.products[req.target].product_id
                    ))
                } else {
                    let pages = ranked.len().div_ceil(self.cfg.page_size).max(1);
                    if page + 1 < pages {
                        Some("click[Next >]".into())
                    } else {
                        // Target did not surface; stall until truncation.
                        Some(THINK_ACTION.to_string())
                    }
                }
            }
            (Page::Results { ranked, page }, OracleMode::Decoy) => {
                visible(ranked, *page, self.cfg.page_size)
                    .first()
                    .map(|&i| format!("click[{}]", self.catalog.products[i].product_id))
                    .or(Some(THINK_ACTION.to_string()))
            }
            (Page::Product { idx, .. }, OracleMode::Perfect) => {
                if *idx != req.target {
                    return Some("click[< Prev]".into());
                }
                for (name, value) in &req.options {
                    if self.selections.get(name) != Some(value) {
                        return Some(format!("click[{value}]"));
                    }
                }
                Some("click[Buy Now]".into())
            }
            (Page::Product { .. }, OracleMode::Decoy) => Some("click[Buy Now]".into()),
        }
    }
}

/// Every ground click action the configuration can offer. Search actions are
/// goal-dependent and collapse to the shared search template token.
pub(super) fn action_namespace(cfg: &MiniShopConfig) -> Vec<String> {
    let catalog = Catalog::generate(cfg);
    let mut actions = Vec::new();
    for p in &catalog.products {
        actions.push(format!("click[{}]", p.product_id));
    }
    for v in COLOR_VALUES.iter().chain(SIZE_VALUES.iter()) {
        actions.push(format!("click[{v}]"));
    }
    actions.push("click[Buy Now]".into());
    actions.push("click[Next >]".into());
    actions.push("click[< Prev]".into());
    actions.push("click[Back to Search]".into());
    actions
}

/// Every observation template the emitter can produce.
pub(super) fn observation_namespace(cfg: &MiniShopConfig) -> Vec<String> {
    let catalog = Catalog::generate(cfg);
    let mut obs = vec![
        "obs::search_page".to_string(),
        "obs::bought".to_string(),
        "obs::invalid".to_string(),
    ];
    let pages = RESULT_CAP.div_ceil(cfg.page_size).max(1);
    for p in 1..=pages {
        obs.push(format!("obs::results {p}"));
    }
    for p in &catalog.products {
        obs.push(format!("obs::product {}", p.product_id));
    }
    for v in COLOR_VALUES.iter().chain(SIZE_VALUES.iter()) {
        obs.push(format!("obs::clicked {v}"));
    }
    obs
}

/// Map an emitted observation back onto its template token.
pub(super) fn observation_token(text: &str) -> Option<String> {
    if text.starts_with("MiniShop\n") {
        return Some("obs::search_page".into());
    }
    if text == "Your purchase is complete." {
        return Some("obs::bought".into());
    }
    if text == "Invalid action." {
        return Some("obs::invalid".into());
    }
    if let Some(rest) = text.strip_prefix("You have clicked ") {
        let value = rest.strip_suffix('.')?;
        return Some(format!("obs::clicked {value}"));
    }
    if text.contains("(Total results:") {
        let page = text
            .lines()
            .find(|l| l.starts_with("Page "))?
            .strip_prefix("Page ")?
            .split(' ')
            .next()?;
        return Some(format!("obs::results {page}"));
    }
    if text.starts_with("[Back to Search]") && text.contains("[Buy Now]") {
        let pid = text
            .lines()
            .find(|l| l.starts_with("[P") && l.ends_with(']'))?
            .trim_matches(['[', ']']);
        return Some(format!("obs::product {pid}"));
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_tasks, EnvConfig, SegmentTokenizer};
    use crate::trajectory::{SegmentKind, Split};

    fn fixture_cfg() -> MiniShopConfig {
        MiniShopConfig::default()
    }

    fn fixture() -> (MiniShop, TaskSpec, u64) {
        let cfg = fixture_cfg();
        let tasks = generate_tasks(&EnvConfig::MiniShop(cfg.clone()), Split::Train, 1, 5);
        (MiniShop::new(cfg), tasks[0].spec.clone(), tasks[0].layout_seed)
    }

    #[test]
    fn reset_shows_instruction_and_search() {
        let (mut env, task, seed) = fixture();
        let obs = env.reset(&task, seed).unwrap();
        assert!(obs.text.starts_with("MiniShop\nInstruction: i need a "));
        assert!(obs.text.ends_with("[Search]"));
        let again = env.reset(&task, seed).unwrap();
        assert_eq!(obs, again);
    }

    #[test]
    fn perfect_oracle_earns_full_reward() {
        let (mut env, task, seed) = fixture();
        env.reset(&task, seed).unwrap();
        let mut reward = None;
        for _ in 0..30 {
            let action = env.oracle_action(OracleMode::Perfect).unwrap();
            let out = env.step(&action).unwrap();
            assert!(out.action_valid, "oracle action {action} was invalid");
            if out.observation.terminal {
                reward = out.observation.reward_if_terminal;
                break;
            }
        }
        assert_eq!(reward, Some(1.0));
    }

    #[test]
    fn decoy_oracle_reward_is_graded_below_one() {
        // The decoy never selects options, so with one required option the
        // reward is at most (attrs + 0 + 1) / (attrs + 1 + 1) < 1.
        let (mut env, task, seed) = fixture();
        env.reset(&task, seed).unwrap();
        let mut reward = None;
        for _ in 0..30 {
            let action = env.oracle_action(OracleMode::Decoy).unwrap();
            let out = env.step(&action).unwrap();
            if out.observation.terminal {
                reward = out.observation.reward_if_terminal;
                break;
            }
        }
        let r = reward.unwrap();
        assert!(r < 1.0, "decoy reward was {r}");
        assert!(r >= 0.0);
    }

    #[test]
    fn reward_formula_brute_force_case() {
        // 2 required attributes + 1 required option + price cap. Purchase a
        // product carrying 1 of the 2 attributes, the right option selected,
        // price under cap: (1 + 1 + 1) / (2 + 1 + 1) = 0.75.
        let catalog = Catalog {
            products: vec![
                Product {
                    product_id: "P000".into(),
                    title: "portable wireless speaker".into(),
                    category: "speaker",
                    attributes: vec!["portable".into(), "wireless".into()],
                    options: BTreeMap::from([(
                        "color".to_string(),
                        vec!["black".to_string(), "blue".to_string()],
                    )]),
                    price: 20.0,
                },
                Product {
                    product_id: "P001".into(),
                    title: "portable rustic speaker".into(),
                    category: "speaker",
                    attributes: vec!["portable".into(), "rustic".into()],
                    options: BTreeMap::from([(
                        "color".to_string(),
                        vec!["black".to_string()],
                    )]),
                    price: 15.0,
                },
            ],
        };
        let req = Requirements {
            target: 0,
            attributes: vec!["portable".into(), "wireless".into()],
            options: BTreeMap::from([("color".to_string(), "black".to_string())]),
            price_cap: 30.0,
        };
        let all = BTreeMap::from([("color".to_string(), "black".to_string())]);
        assert_eq!(req.reward(&catalog, 0, &all), 1.0);
        assert_eq!(req.reward(&catalog, 1, &all), 0.75);
        let none = BTreeMap::new();
        assert_eq!(req.reward(&catalog, 0, &none), 0.75);
        // Price violation alone: matched attrs 2, option 1, price 0 -> 3/4.
        let pricey = Requirements {
            price_cap: 10.0,
            ..req.clone()
        };
        assert_eq!(pricey.reward(&catalog, 0, &all), 0.75);
    }

    #[test]
    fn results_page_lists_clicks_and_navigation() {
        let (mut env, task, seed) = fixture();
        env.reset(&task, seed).unwrap();
        let query = env.oracle_action(OracleMode::Perfect).unwrap();
        let out = env.step(&query).unwrap();
        assert!(out.observation.text.contains("(Total results:"));
        let space = env.action_space();
        let clicks = space
            .iter()
            .filter(|a| a.starts_with("click[P"))
            .count();
        assert_eq!(clicks, 3, "page size 3 products clickable: {space:?}");
        assert!(space.contains(&"click[Back to Search]".to_string()));
    }

    #[test]
    fn listed_actions_valid_and_unklisted_invalid() {
        let (mut env, task, seed) = fixture();
        env.reset(&task, seed).unwrap();
        for _ in 0..5 {
            for action in env.action_space() {
                let mut probe = env.clone();
                let out = probe.step(&action).unwrap();
                assert!(out.action_valid, "listed action {action} invalid");
            }
            let mut probe = env.clone();
            let out = probe.step("click[NoSuchThing]").unwrap();
            assert!(!out.action_valid);
            assert_eq!(out.observation.text, "Invalid action.");

            let next = env.oracle_action(OracleMode::Perfect).unwrap();
            if env.step(&next).unwrap().observation.terminal {
                break;
            }
        }
        assert!(env.is_terminal());
        assert!(env.action_space().is_empty());
    }

    #[test]
    fn emitted_observations_all_tokenize() {
        let (mut env, task, seed) = fixture();
        let tokenizer = SegmentTokenizer::for_config(&EnvConfig::MiniShop(fixture_cfg()));
        let first = env.reset(&task, seed).unwrap();
        assert_eq!(
            tokenizer
                .token_for(SegmentKind::Observation, &first.text)
                .as_deref(),
            Some("obs::search_page")
        );
        loop {
            let action = env.oracle_action(OracleMode::Perfect).unwrap();
            let out = env.step(&action).unwrap();
            let tok = tokenizer.token_for(SegmentKind::Observation, &out.observation.text);
            assert!(tok.is_some(), "no token for: {}", out.observation.text);
            if out.observation.terminal {
                break;
            }
        }
    }
}
