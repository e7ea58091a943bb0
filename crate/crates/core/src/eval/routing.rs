//! Fast-path routing over a designed library: precision and recall against
//! known targets, and how much discoverability depends on authoring quality.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use serde_json::{json, Value};

use super::fixture::{fixture_engine, FixtureCompleter};
use super::{ratio, Band, EvalError, ExperimentSpec, Manifest, Metric, MetricsReport};
use crate::engine::Engine;
use crate::governance::{GovernanceVariable, RouteMode};
use crate::providers::{Matcher, PromptKind, ScriptBuilder, ScriptedCompleter};

const ORG_LIBRARY: &str = "eval-routing";
const ORG_RICH: &str = "eval-authoring-rich";
const ORG_BARE: &str = "eval-authoring-bare";

struct Var {
    id: &'static str,
    category: &'static str,
    name: &'static str,
    description: &'static str,
    tags: &'static [&'static str],
    triggers: &'static [&'static str],
    hype: &'static [&'static str],
    body: &'static [&'static str],
}

const LIBRARY: [Var; 25] = [
    // sales
    Var {
        id: "cold_outreach_playbook",
        category: "sales",
        name: "Cold outreach playbook",
        description: "How to write first-touch prospecting emails to new prospects",
        tags: &["sales", "outreach", "prospecting"],
        triggers: &["cold", "outreach", "prospecting"],
        hype: &[
            "write a cold outreach email to a new prospect",
            "first email to a prospect who has never heard of us",
            "prospecting message for an operations director",
            "how should a cold email open",
            "cold email to an operations leader at a logistics company",
        ],
        body: &["## Structure", "Open with a trigger event at the prospect's company.", "Keep first emails under 120 words.", "## Follow up", "Send at most three follow ups, four days apart."],
    },
    Var {
        id: "discovery_call_guide",
        category: "sales",
        name: "Discovery call guide",
        description: "Questions and flow for qualifying discovery calls",
        tags: &["sales", "discovery", "qualification"],
        triggers: &["discovery"],
        hype: &[
            "prepare questions for a discovery call",
            "what to ask a new prospect on the first call",
            "how to qualify budget authority and timeline",
            "discovery call questions for a new prospect",
        ],
        body: &["## Agenda", "Confirm the agenda and time box in the first minute.", "## Questions", "Ask about current process, pain, impact and who signs."],
    },
    Var {
        id: "pricing_negotiation",
        category: "sales",
        name: "Pricing and discount negotiation",
        description: "Discount limits, concessions and how to respond to price pushback",
        tags: &["sales", "pricing", "discount"],
        triggers: &["discount", "pricing", "negotiate"],
        hype: &[
            "customer is asking for a bigger discount",
            "how much discount can I offer on a multi year deal",
            "buyer wants a bigger percent discount for a longer contract",
            "what discount is allowed on a three year agreement",
            "respond to price pushback from a buyer",
        ],
        body: &["## Limits", "Reps may offer up to 15 percent; above that needs a deal desk review.", "## Trades", "Trade discount only for term length or case study rights."],
    },
    Var {
        id: "demo_script",
        category: "sales",
        name: "Product demo script",
        description: "Standard flow for live product demonstrations",
        tags: &["sales", "demo"],
        triggers: &["demo", "demonstration"],
        hype: &[
            "run a product demo for a prospect",
            "what to show in a live demo",
            "demo flow for the dispatch dashboard",
            "prepare a live product demo for a prospect",
        ],
        body: &["## Flow", "Start with the customer's top pain, then show the dispatch board.", "## Close", "End every demo by agreeing a next step on the calendar."],
    },
    Var {
        id: "renewal_playbook",
        category: "sales",
        name: "Renewal playbook",
        description: "Running renewal conversations before a contract expires",
        tags: &["sales", "renewal", "retention"],
        triggers: &["renewal", "renew", "expires"],
        hype: &[
            "plan the renewal conversation for an account",
            "contract expires next month what should we do",
            "renewal plan for an expiring account contract",
            "how early should renewal outreach start",
        ],
        body: &["## Timing", "Start renewal talks 90 days before the contract expires.", "## Review", "Bring a usage review and a value summary to the first meeting."],
    },
    // compliance
    Var {
        id: "gdpr_data_handling",
        category: "compliance",
        name: "GDPR personal data handling",
        description: "Handling EU personal data requests such as access and erasure",
        tags: &["compliance", "gdpr", "privacy"],
        triggers: &["gdpr", "erasure", "personal data"],
        hype: &[
            "customer asked us to delete all of their personal data",
            "handle a data subject access request",
            "right to erasure request from a European customer",
            "a customer asked us to erase their personal data",
        ],
        body: &["## Erasure", "Complete erasure requests within 30 days and confirm in writing.", "## Access", "Export all personal data we hold in a machine readable format."],
    },
    Var {
        id: "hipaa_phi_policy",
        category: "compliance",
        name: "HIPAA protected health information policy",
        description: "Rules for sharing patient health information",
        tags: &["compliance", "hipaa", "healthcare"],
        triggers: &["hipaa", "patient", "phi"],
        hype: &[
            "can I send a patient's lab results by email",
            "sharing patient health records with another doctor",
            "what counts as protected health information",
            "email patient results to another doctor",
        ],
        body: &["## Sharing", "Share patient records only through the secure portal.", "## Minimum necessary", "Disclose the minimum information needed for the purpose."],
    },
    Var {
        id: "record_retention",
        category: "compliance",
        name: "Record retention schedule",
        description: "How long to keep financial and contract records before deletion",
        tags: &["compliance", "retention", "records"],
        triggers: &["retention", "retain"],
        hype: &[
            "how long do we keep old invoices and contracts",
            "when can we delete old financial records",
            "retention period for signed contracts",
            "how long to keep invoices",
        ],
        body: &["## Periods", "Keep invoices for seven years and contracts for six years after expiry.", "## Disposal", "Destroy records through the certified shredding vendor."],
    },
    Var {
        id: "vendor_security_review",
        category: "compliance",
        name: "Vendor security review",
        description: "Assessment required before onboarding a new vendor or subprocessor",
        tags: &["compliance", "vendor", "security"],
        triggers: &["vendor", "subprocessor", "third party"],
        hype: &[
            "onboard a new vendor that will process customer data",
            "security questionnaire for a third party supplier",
            "approve a new subprocessor",
            "new analytics vendor will process our customer data",
        ],
        body: &["## Review", "Every vendor touching customer data completes the security questionnaire.", "## Contract", "A data processing agreement must be signed before access is granted."],
    },
    Var {
        id: "anti_bribery_policy",
        category: "compliance",
        name: "Anti-bribery and gifts policy",
        description: "Limits on gifts, hospitality and payments to officials",
        tags: &["compliance", "gifts", "ethics"],
        triggers: &["gift", "gifts", "bribery", "hospitality"],
        hype: &[
            "can I accept a gift from a customer",
            "taking a client to an expensive dinner",
            "rules for gifts and hospitality",
            "customer offered me an expensive gift",
        ],
        body: &["## Limits", "Gifts above 100 dollars need written approval from legal.", "## Officials", "Never offer anything of value to a government official."],
    },
    // engineering
    Var {
        id: "code_review_standards",
        category: "engineering",
        name: "Code review standards",
        description: "What reviewers check before approving a pull request",
        tags: &["engineering", "code review"],
        triggers: &["pull request", "code review", "review"],
        hype: &[
            "review this pull request",
            "what should a code reviewer check",
            "approval rules for merging changes",
            "review a pull request for the billing service",
        ],
        body: &["## Checks", "Every change needs tests and one approving reviewer.", "## Tone", "Comment on the code, never the author."],
    },
    Var {
        id: "incident_response_runbook",
        category: "engineering",
        name: "Incident response runbook",
        description: "Steps when production is down or degraded",
        tags: &["engineering", "incident", "outage"],
        triggers: &["outage", "incident", "down"],
        hype: &[
            "production is down and customers cannot use the product",
            "handle a production outage",
            "customers cannot pay because production is down",
            "who leads an incident and how do we communicate",
        ],
        body: &["## First steps", "Declare an incident in the incident channel and name a lead.", "## Updates", "Post status page updates every 30 minutes."],
    },
    Var {
        id: "deployment_checklist",
        category: "engineering",
        name: "Deployment checklist",
        description: "Steps to ship a release to production safely",
        tags: &["engineering", "deployment", "release"],
        triggers: &["deploy", "deployment", "ship", "rollout"],
        hype: &[
            "ship the new release to production",
            "deploy tonight what do I need to check",
            "rollback plan for a release",
            "ship a release to production tonight",
        ],
        body: &["## Before", "Confirm migrations are backward compatible and the rollback plan is written.", "## After", "Watch error rates for 30 minutes after the rollout."],
    },
    Var {
        id: "api_design_guidelines",
        category: "engineering",
        name: "API design guidelines",
        description: "Conventions for REST endpoints, pagination and errors",
        tags: &["engineering", "api", "rest"],
        triggers: &["api", "endpoint", "rest"],
        hype: &[
            "design a rest endpoint for listing resources",
            "how should api pagination work",
            "error format for a new api endpoint",
            "design a rest api endpoint for invoices",
        ],
        body: &["## Resources", "Use plural nouns and cursor pagination for list endpoints.", "## Errors", "Return a JSON error object with a stable code."],
    },
    Var {
        id: "on_call_rotation",
        category: "engineering",
        name: "On-call rotation",
        description: "Who is paged for production problems and how to hand over",
        tags: &["engineering", "on-call", "paging"],
        triggers: &["page", "paged", "on call"],
        hype: &[
            "who should be paged when production is down",
            "on call handover checklist",
            "escalate to the secondary on call engineer",
            "who do we page for a production problem",
            "checkout is down who is on call",
        ],
        body: &["## Paging", "Page the primary first and the secondary after 10 minutes without acknowledgement.", "## Handover", "Hand over open incidents in writing at shift change."],
    },
    // marketing
    Var {
        id: "brand_voice_guide",
        category: "marketing",
        name: "Brand voice guide",
        description: "Tone and wording for all public marketing copy",
        tags: &["marketing", "brand", "voice"],
        triggers: &["brand", "announce", "announcing", "post", "press"],
        hype: &[
            "write public copy in our brand voice",
            "tone for announcing a new feature",
            "words to avoid in marketing copy",
            "tone for a linkedin post or press release",
            "brand voice for announcing funding or a new feature",
        ],
        body: &["## Tone", "Confident, plain and warm; no hype words.", "## Words", "Say customers, not users; avoid jargon."],
    },
    Var {
        id: "social_media_policy",
        category: "marketing",
        name: "Social media policy",
        description: "Rules for posting on LinkedIn and other social channels",
        tags: &["marketing", "social media", "linkedin"],
        triggers: &["linkedin", "social", "tweet"],
        hype: &[
            "write a linkedin post about our product",
            "can I post customer names on social media",
            "social post announcing a feature",
            "linkedin post announcing a new feature",
        ],
        body: &["## Approval", "Posts naming customers need written customer approval.", "## Cadence", "Company pages post at most once per business day."],
    },
    Var {
        id: "campaign_launch_checklist",
        category: "marketing",
        name: "Campaign launch checklist",
        description: "Planning and launching multi-channel marketing campaigns",
        tags: &["marketing", "campaign", "launch"],
        triggers: &["campaign", "launch"],
        hype: &[
            "plan the launch campaign for a product release",
            "checklist before launching a marketing campaign",
            "campaign timeline and channels",
            "spring launch campaign plan",
        ],
        body: &["## Plan", "Set one goal metric and a budget owner per campaign.", "## Launch", "Test every tracking link before the campaign goes live."],
    },
    Var {
        id: "seo_content_guidelines",
        category: "marketing",
        name: "SEO content guidelines",
        description: "Writing blog articles that rank in search",
        tags: &["marketing", "seo", "blog"],
        triggers: &["seo", "blog", "search"],
        hype: &[
            "write a blog article optimized for search",
            "keyword research for a new blog post",
            "how long should an seo article be",
            "blog article about route planning for search",
        ],
        body: &["## Keywords", "Pick one primary keyword and use it in the title.", "## Length", "Aim for 1200 to 1800 words with descriptive subheadings."],
    },
    Var {
        id: "press_release_template",
        category: "marketing",
        name: "Press release template",
        description: "Format and approvals for press releases and funding news",
        tags: &["marketing", "press", "pr"],
        triggers: &["press release", "press", "funding"],
        hype: &[
            "draft a press release about our funding round",
            "press release format and boilerplate",
            "announce news to journalists",
            "press release about a series b funding round",
        ],
        body: &["## Format", "Headline, dateline, two quotes and the company boilerplate.", "## Approval", "The CEO and legal approve every release."],
    },
    // support
    Var {
        id: "refund_policy",
        category: "support",
        name: "Refund policy",
        description: "When customers get their money back after cancelling",
        tags: &["support", "refund", "billing"],
        triggers: &["refund", "money back", "cancel", "cancelling"],
        hype: &[
            "customer wants their money back after cancelling",
            "are we allowed to refund an annual plan",
            "refund within the first weeks",
            "refund after cancelling within two weeks",
        ],
        body: &["## Window", "Full refunds within 30 days of purchase.", "## Annual plans", "After 30 days annual plans are refunded pro rata."],
    },
    Var {
        id: "escalation_matrix",
        category: "support",
        name: "Support escalation matrix",
        description: "When and to whom support cases escalate",
        tags: &["support", "escalation"],
        triggers: &["escalate", "escalation", "manager", "severity"],
        hype: &[
            "enterprise customer wants to speak to a manager",
            "escalate a severity one support case",
            "who owns escalated customer complaints",
            "customer reports an outage and asks for a manager",
            "enterprise customer wants the case escalated",
        ],
        body: &["## Severity one", "Severity one cases go to the duty manager within 15 minutes.", "## Ownership", "The escalation owner updates the customer every two hours."],
    },
    Var {
        id: "ticket_triage_guide",
        category: "support",
        name: "Ticket triage guide",
        description: "Sorting and prioritizing incoming support tickets",
        tags: &["support", "triage", "tickets"],
        triggers: &["triage", "tickets", "ticket", "urgency"],
        hype: &[
            "sort incoming support tickets by urgency",
            "how to prioritize the ticket queue",
            "tag and route new tickets",
            "sort todays support tickets by urgency",
        ],
        body: &["## Priority", "Outages first, then billing, then how-to questions.", "## Routing", "Tag every ticket with product area before assigning."],
    },
    Var {
        id: "customer_apology_templates",
        category: "support",
        name: "Customer apology templates",
        description: "Wording for apologizing after delays and mistakes",
        tags: &["support", "apology", "communication"],
        triggers: &["apologize", "apology", "sorry", "delayed"],
        hype: &[
            "apologize to a customer whose shipment was delayed",
            "write a sorry note after a service mistake",
            "apology wording for a missed deadline",
            "customer shipment was delayed again apologize",
        ],
        body: &["## Apology", "Acknowledge the impact, own the mistake, state the fix.", "## Credit", "Offer a service credit only with team lead approval."],
    },
    Var {
        id: "sla_commitments",
        category: "support",
        name: "SLA commitments",
        description: "Response and resolution time commitments by plan and severity",
        tags: &["support", "sla", "response time"],
        triggers: &["sla", "severity", "response time", "outage"],
        hype: &[
            "what response time do we owe an enterprise customer",
            "severity one outage sla",
            "resolution targets by plan",
            "enterprise customer reports a severity one outage",
            "response time commitment for an outage",
        ],
        body: &["## Enterprise", "Severity one: 30 minute response, 4 hour workaround.", "## Standard", "Next business day response for all severities."],
    },
];

/// `(task, target variable ids)`.
const TASKS: [(&str, &[&str]); 20] = [
    ("Write a cold outreach email to the operations director at a freight company", &["cold_outreach_playbook"]),
    ("Prepare questions for tomorrow's discovery call with a new prospect", &["discovery_call_guide"]),
    ("The buyer is asking for a 30 percent discount on a three year deal", &["pricing_negotiation"]),
    ("Plan the renewal conversation for an account whose contract expires next month", &["renewal_playbook"]),
    ("A customer in Germany asked us to delete all of their personal data", &["gdpr_data_handling"]),
    ("Can I email a patient's lab results to their new doctor?", &["hipaa_phi_policy"]),
    ("How long do we have to keep old invoices and signed contracts?", &["record_retention"]),
    ("We want to onboard a new analytics vendor that will process customer data", &["vendor_security_review"]),
    ("Production checkout is down and customers cannot pay; who do we page?", &["incident_response_runbook", "on_call_rotation"]),
    ("Review this pull request that changes the billing service", &["code_review_standards"]),
    ("Ship the new release to production tonight", &["deployment_checklist"]),
    ("Design a REST endpoint for listing customer invoices", &["api_design_guidelines"]),
    ("Write a LinkedIn post announcing our new route planning feature", &["social_media_policy", "brand_voice_guide"]),
    ("Draft a press release about our Series B funding", &["press_release_template", "brand_voice_guide"]),
    ("Plan the launch campaign for the spring product release", &["campaign_launch_checklist"]),
    ("Write a blog article optimized for search about route planning", &["seo_content_guidelines"]),
    ("A customer wants their money back after cancelling within two weeks", &["refund_policy"]),
    ("An enterprise customer reports a severity one outage and wants a manager", &["escalation_matrix", "sla_commitments"]),
    ("Sort today's incoming support tickets by urgency", &["ticket_triage_guide"]),
    ("Apologize to a customer whose shipment was delayed twice", &["customer_apology_templates"]),
];

/// Same body, authored two ways.
struct Pair {
    id: &'static str,
    category: &'static str,
    rich: Var,
    tasks: [&'static str; 3],
}

const PAIRS: [Pair; 5] = [
    Pair {
        id: "logo_usage",
        category: "brand",
        rich: Var {
            id: "logo_usage",
            category: "brand",
            name: "Logo and email signature standards",
            description: "Correct logo files, colors and employee email signatures",
            tags: &["brand", "logo", "signature"],
            triggers: &["logo", "signature"],
            hype: &[
                "which logo file should I use in a slide deck",
                "set up my email signature",
                "what are our brand colors",
            ],
            body: &["## Files", "Use the horizontal mark on light backgrounds and the white mark on dark ones.", "## Clear space", "Leave clear space equal to the height of the letter G.", "## Signatures", "Name, title, phone; no quotes or images besides the small mark."],
        },
        tasks: [
            "Which version of our logo goes on a dark slide background?",
            "Set up my new email signature",
            "What brand colors can I use in a partner one pager?",
        ],
    },
    Pair {
        id: "tier_matrix",
        category: "product",
        rich: Var {
            id: "tier_matrix",
            category: "product",
            name: "Product tier feature matrix",
            description: "Which features ship in the Starter, Growth and Enterprise plans",
            tags: &["product", "plans", "features"],
            triggers: &["starter", "growth", "enterprise plan", "tier"],
            hype: &[
                "which plan includes single sign on",
                "does the starter plan have api access",
                "compare features across plans",
            ],
            body: &["## Starter", "Up to 10 vehicles, web dashboard only.", "## Growth", "Adds mobile app, api access and route optimization.", "## Enterprise", "Adds single sign on, audit logs and a dedicated success manager."],
        },
        tasks: [
            "Does the Starter plan include API access?",
            "Which plan do they need for single sign on?",
            "Compare features between the Growth and Enterprise plans",
        ],
    },
    Pair {
        id: "warranty_claims",
        category: "support",
        rich: Var {
            id: "warranty_claims",
            category: "support",
            name: "Hardware warranty claim procedure",
            description: "Replacing faulty telematics devices under warranty",
            tags: &["support", "warranty", "hardware"],
            triggers: &["warranty", "faulty", "device", "replacement"],
            hype: &[
                "a telematics device stopped working is it under warranty",
                "replace a faulty tracker",
                "how to file a hardware warranty claim",
            ],
            body: &["## Coverage", "Devices are covered for 24 months from shipment.", "## Process", "Collect the serial number and photos, then ship an advance replacement."],
        },
        tasks: [
            "A customer's telematics device stopped working after a year",
            "How do I file a warranty claim for a faulty tracker?",
            "Ship a replacement device to a fleet customer",
        ],
    },
    Pair {
        id: "export_screening",
        category: "compliance",
        rich: Var {
            id: "export_screening",
            category: "compliance",
            name: "Export control and sanctions screening",
            description: "Screening customers and shipments against sanctions lists",
            tags: &["compliance", "export", "sanctions"],
            triggers: &["sanctions", "export", "embargoed", "screening"],
            hype: &[
                "can we sell to a company in a sanctioned country",
                "screen a new customer against sanctions lists",
                "export rules for shipping devices abroad",
            ],
            body: &["## Screening", "Screen every new customer against the consolidated sanctions list.", "## Shipping", "Devices may not ship to embargoed destinations."],
        },
        tasks: [
            "Can we sell to a distributor in a sanctioned country?",
            "Screen this new overseas customer before we sign",
            "Are there export rules for shipping trackers abroad?",
        ],
    },
    Pair {
        id: "db_migrations",
        category: "engineering",
        rich: Var {
            id: "db_migrations",
            category: "engineering",
            name: "Database migration policy",
            description: "Writing and running schema migrations on production databases",
            tags: &["engineering", "database", "migrations"],
            triggers: &["migration", "migrations", "schema change", "database"],
            hype: &[
                "add a column to a large production table",
                "run a database migration safely",
                "schema change without downtime",
            ],
            body: &["## Rules", "Migrations must be reversible and run in under five minutes.", "## Large tables", "Backfill large tables in batches outside peak hours."],
        },
        tasks: [
            "Add a new column to the shipments table in production",
            "How do I run a database migration without downtime?",
            "Plan a schema change for the billing database",
        ],
    },
];

fn content(v: &Var) -> String {
    let mut s = format!("# {}\n", v.name);
    for l in v.body {
        s.push_str(l);
        s.push('\n');
    }
    s
}

fn variable(v: &Var, org: &str) -> GovernanceVariable {
    GovernanceVariable::new(v.id, org, v.name, v.description, v.tags, &content(v))
}

fn bare_variable(p: &Pair, n: usize, org: &str) -> GovernanceVariable {
    GovernanceVariable::new(p.id, org, &format!("Doc {n}"), "", &[], &content(&p.rich).replacen(&format!("# {}\n", p.rich.name), "", 1))
}

/// Enrichment answers keyed by variable name; unscripted names get the
/// neutral response (no synthetic queries, no triggers).
fn script() -> ScriptedCompleter {
    let mut b: ScriptBuilder = ScriptedCompleter::builder();
    for v in LIBRARY.iter().chain(PAIRS.iter().map(|p| &p.rich)) {
        let name = v.name.to_string();
        let n2 = name.clone();
        b = b
            .on(PromptKind::HypeQueries, Matcher::predicate(move |p| p["name"] == name.as_str()), json!({"queries": v.hype}))
            .on(
                PromptKind::ScopeInference,
                Matcher::predicate(move |p| p["name"] == n2.as_str()),
                json!({"alwaysOn": false, "triggerKeywords": v.triggers}),
            );
    }
    b.build()
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct RoutingFixture {
    pub library: Vec<Value>,
    pub tasks: Vec<Value>,
    pub pairs: Vec<Value>,
}

pub fn fixture(_spec: &ExperimentSpec) -> RoutingFixture {
    let var_json = |v: &Var| {
        json!({
            "id": v.id, "category": v.category, "name": v.name, "description": v.description,
            "tags": v.tags, "triggerKeywords": v.triggers, "hypeQueries": v.hype, "content": content(v),
        })
    };
    RoutingFixture {
        library: LIBRARY.iter().map(var_json).collect(),
        tasks: TASKS.iter().map(|(t, targets)| json!({"task": t, "targets": targets})).collect(),
        pairs: PAIRS
            .iter()
            .enumerate()
            .map(|(i, p)| json!({"category": p.category, "rich": var_json(&p.rich), "bareName": format!("Doc {}", i + 1), "tasks": p.tasks}))
            .collect(),
    }
}

pub fn manifest() -> Manifest {
    let mut m = Manifest::default();
    let categories: BTreeSet<&str> = LIBRARY.iter().map(|v| v.category).collect();
    m.check("library size", LIBRARY.len() == 25, format!("{} variables", LIBRARY.len()));
    m.check("categories", categories.len() == 5, format!("{categories:?}"));
    let per_cat = categories
        .iter()
        .all(|c| LIBRARY.iter().filter(|v| v.category == *c).count() == 5);
    m.check("five variables per category", per_cat, "");
    let ids: BTreeSet<&str> = LIBRARY.iter().map(|v| v.id).chain(PAIRS.iter().map(|p| p.id)).collect();
    m.check("ids distinct", ids.len() == LIBRARY.len() + PAIRS.len(), "");
    let known = TASKS.iter().all(|(_, t)| !t.is_empty() && t.iter().all(|id| LIBRARY.iter().any(|v| v.id == *id)));
    m.check("task targets exist", known && TASKS.len() == 20, format!("{} tasks", TASKS.len()));
    let pair_tasks: usize = PAIRS.iter().map(|p| p.tasks.len()).sum();
    m.check("authoring pairs", PAIRS.len() == 5 && pair_tasks == 15, format!("{} pairs, {pair_tasks} tasks", PAIRS.len()));
    let same_body = PAIRS
        .iter()
        .enumerate()
        .all(|(i, p)| variable(&p.rich, "x").content.ends_with(&bare_variable(p, i + 1, "x").content));
    m.check("pair bodies identical", same_body, "rich and bare share the body text");
    m
}

pub fn dataset(spec: &ExperimentSpec) -> Value {
    json!({"fixture": fixture(spec), "manifest": manifest()})
}

fn critical_ids(engine: &Engine, org: &str, task: &str) -> Result<Vec<String>, EvalError> {
    let g = engine.govern(org, task, RouteMode::Fast, None, false)?;
    Ok(g.routed.critical.into_iter().map(|c| c.variable_id).collect())
}

pub fn run(spec: &ExperimentSpec) -> Result<MetricsReport, EvalError> {
    let manifest = manifest();
    manifest.verify()?;
    let (engine, _clock) = fixture_engine(FixtureCompleter::with_script(script()))?;
    for org in [ORG_LIBRARY, ORG_RICH, ORG_BARE] {
        for v in &LIBRARY {
            engine.put_variable(variable(v, org), None)?;
        }
    }
    for (i, p) in PAIRS.iter().enumerate() {
        engine.put_variable(variable(&p.rich, ORG_RICH), None)?;
        engine.put_variable(bare_variable(p, i + 1, ORG_BARE), None)?;
    }

    let (mut selected, mut correct, mut targets) = (0, 0, 0);
    let mut rows = Vec::new();
    for (task, want) in TASKS {
        let got = critical_ids(&engine, ORG_LIBRARY, task)?;
        let hits = got.iter().filter(|id| want.contains(&id.as_str())).count();
        selected += got.len();
        correct += hits;
        targets += want.len();
        rows.push(json!({"task": task, "targets": want, "critical": got, "hits": hits}));
    }

    let (mut rich_found, mut bare_found) = (0, 0);
    let mut per_category: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut pair_rows = Vec::new();
    for p in &PAIRS {
        for task in p.tasks {
            let rich = critical_ids(&engine, ORG_RICH, task)?.iter().any(|id| id == p.id);
            let bare = critical_ids(&engine, ORG_BARE, task)?.iter().any(|id| id == p.id);
            rich_found += usize::from(rich);
            bare_found += usize::from(bare);
            let c = per_category.entry(p.category).or_default();
            c.0 += usize::from(rich);
            c.1 += usize::from(bare);
            pair_rows.push(json!({"category": p.category, "task": task, "rich": rich, "bare": bare}));
        }
    }
    let n_pair_tasks: usize = PAIRS.iter().map(|p| p.tasks.len()).sum();
    let rich_rate = ratio(rich_found, n_pair_tasks);
    let bare_rate = ratio(bare_found, n_pair_tasks);

    let metrics = vec![
        Metric::banded("precision", ratio(correct, selected), "critical selections that are known targets / critical selections", Band::AtLeast(0.90))
            .reference("92% precision"),
        Metric::banded("recall", ratio(correct, targets), "known targets selected as critical / known targets", Band::AtLeast(0.85))
            .reference("88% recall"),
        Metric::banded("discovery_gap", rich_rate - bare_rate, "discovery rate (rich metadata) - discovery rate (bare metadata)", Band::AtLeast(0.20))
            .reference("20-50 percentage points"),
        Metric::info("discovery_rate_rich", rich_rate, "pair tasks whose rich variable is critical / pair tasks"),
        Metric::info("discovery_rate_bare", bare_rate, "pair tasks whose bare variable is critical / pair tasks"),
        Metric::info("critical_selections", selected as f64, "critical selections across routing tasks"),
    ];
    let per_cat: Vec<Value> = per_category
        .iter()
        .map(|(c, (r, b))| json!({"category": c, "rich": ratio(*r, 3), "bare": ratio(*b, 3)}))
        .collect();
    let details = json!({"mode": "fast", "tasks": rows, "authoring": pair_rows, "authoringByCategory": per_cat});
    Ok(MetricsReport::new(spec, manifest, metrics, details))
}
