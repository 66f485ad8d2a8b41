//! A small self-contained benchmark: five SQLite databases, a split file in
//! the public benchmark layout, and scripted candidate sets for the stub
//! backend. Used by tests, benches and `verisql make-fixtures`.

use std::collections::HashMap;
use std::io;
use std::path::{Path, PathBuf};

use rusqlite::Connection;

use crate::dataset::{describe_schema_path, render_prompt, Datapoint, Difficulty, PromptTemplate, DEFAULT_SAMPLE_ROWS};
use crate::modelclient::prompt_digest;
use crate::trace::fence;

/// A query whose result no fixture gold query produces.
pub const WRONG_SQL: &str = "SELECT -1 AS wrong_answer";

/// Model output that revises its first query in a second block; the second
/// block is the answer.
pub const REVISED_TRACE: &str = "First find the superheroes of the right race and gender.\n\n\
```sql\nSELECT COUNT(*)\nFROM superhero AS h\nJOIN race AS r ON h.race_id = r.id\nJOIN gender AS g ON h.gender_id = g.id\n\
WHERE r.race = \"God/Eternal\" AND g.gender = \"Male\";\n```\n\n\
The hint already gives race_id = 21, so the join on race is unnecessary. Revised query:\n\n\
```sql\nSELECT COUNT(*)\nFROM superhero AS h\nJOIN gender AS g ON h.gender_id = g.id\nWHERE h.race_id = 21 AND g.gender = 'Male';\n```\n\n\
This counts the male god/eternal superheroes.";

/// Model output that reads the translated type and omits DISTINCT.
pub const FOREIGN_TYPE_TRACE: &str = "Join cards to foreign_data on uuid and filter on the card name and language.\n\n\
```sql\nSELECT fd.type\nFROM cards c\nJOIN foreign_data fd ON c.uuid = fd.uuid\n\
WHERE c.name = \"Ancestor's Chosen\" AND fd.language = \"German\";\n```\n";

/// Model output for the free-meal-rate question.
pub const FREE_MEAL_TRACE: &str = "The rate is the free meal count divided by enrollment, restricted to Alameda.\n\n\
```sql\nSELECT MAX(\"Free Meal Count (K-12)\" / \"Enrollment (K-12)\") AS MaxEligibleFreeRate\nFROM frpm\nWHERE \"County Name\" = 'Alameda';\n```\n";

const DATABASES: &[(&str, &str)] = &[
    (
        "movie_platform",
        r#"
        CREATE TABLE movies (movie_id INTEGER PRIMARY KEY, title TEXT NOT NULL, release_year INTEGER, director TEXT);
        CREATE TABLE ratings (
            rating_id INTEGER PRIMARY KEY,
            movie_id INTEGER REFERENCES movies(movie_id),
            user_id INTEGER,
            score REAL
        );
        INSERT INTO movies VALUES
            (1, 'The Long Night', 1999, 'Ada Park'),
            (2, 'Paper Boats', 2004, 'Luis Ortega'),
            (3, 'Northern Lights', 2011, 'Ada Park'),
            (4, 'Quiet Harbor', 2011, 'Mina Sato'),
            (5, 'Glass Garden', 2020, 'Luis Ortega');
        INSERT INTO ratings VALUES
            (1, 1, 10, 4.5), (2, 1, 11, 4.0), (3, 1, 12, 3.5),
            (4, 2, 10, 2.0), (5, 3, 11, 5.0), (6, 3, 13, 4.5),
            (7, 3, 14, 4.0), (8, 3, 15, 3.0), (9, 4, 12, 3.5),
            (10, 5, 13, 1.5), (11, 5, 14, 2.5);
        "#,
    ),
    (
        "california_schools",
        r#"
        CREATE TABLE schools (CDSCode TEXT PRIMARY KEY, County TEXT, School TEXT, Charter INTEGER);
        CREATE TABLE frpm (
            "CDSCode" TEXT PRIMARY KEY REFERENCES schools(CDSCode),
            "County Name" TEXT,
            "School Name" TEXT,
            "Enrollment (K-12)" REAL,
            "Free Meal Count (K-12)" REAL
        );
        INSERT INTO schools VALUES
            ('01001', 'Alameda', 'Bayside Elementary', 0),
            ('01002', 'Alameda', 'Harbor Middle', 1),
            ('01003', 'Alameda', 'Oak Ridge High', 0),
            ('10001', 'Fresno', 'Valley Academy', 1),
            ('10002', 'Fresno', 'Raisin City Elementary', 0);
        INSERT INTO frpm VALUES
            ('01001', 'Alameda', 'Bayside Elementary', 1000.0, 500.0),
            ('01002', 'Alameda', 'Harbor Middle', 400.0, 300.0),
            ('01003', 'Alameda', 'Oak Ridge High', 50.0, 10.0),
            ('10001', 'Fresno', 'Valley Academy', 100.0, 90.0),
            ('10002', 'Fresno', 'Raisin City Elementary', 250.0, 125.0);
        "#,
    ),
    (
        "superhero",
        r#"
        CREATE TABLE gender (id INTEGER PRIMARY KEY, gender TEXT);
        CREATE TABLE race (id INTEGER PRIMARY KEY, race TEXT);
        CREATE TABLE superhero (
            id INTEGER PRIMARY KEY,
            superhero_name TEXT,
            gender_id INTEGER REFERENCES gender(id),
            race_id INTEGER REFERENCES race(id),
            height_cm INTEGER
        );
        INSERT INTO gender VALUES (1, 'Male'), (2, 'Female');
        INSERT INTO race VALUES (1, 'Human'), (21, 'God/Eternal'), (30, 'Mutant');
        INSERT INTO superhero VALUES
            (1, 'Thunderer', 1, 21, 198),
            (2, 'Allfather', 1, 21, 206),
            (3, 'Star Warden', 2, 21, 180),
            (4, 'Night Fox', 2, 1, 170),
            (5, 'Iron Wall', 1, 1, 188),
            (6, 'Blink', 2, 30, 165),
            (7, 'Sky Hammer', 1, 21, 201);
        "#,
    ),
    (
        "card_games",
        r#"
        CREATE TABLE cards (id INTEGER PRIMARY KEY, uuid TEXT UNIQUE, name TEXT, type TEXT, rarity TEXT, setCode TEXT);
        CREATE TABLE foreign_data (
            id INTEGER PRIMARY KEY,
            uuid TEXT REFERENCES cards(uuid),
            language TEXT,
            name TEXT,
            type TEXT
        );
        INSERT INTO cards VALUES
            (1, 'u-001', 'Ancestor''s Chosen', 'Creature - Human Cleric', 'uncommon', '10E'),
            (2, 'u-002', 'Ancestor''s Chosen', 'Creature - Human Cleric', 'uncommon', 'JUD'),
            (3, 'u-003', 'Angel of Mercy', 'Creature - Angel', 'uncommon', '10E'),
            (4, 'u-004', 'Aven Cloudchaser', 'Creature - Bird Soldier', 'common', '10E');
        INSERT INTO foreign_data VALUES
            (1, 'u-001', 'German', 'Erwählter der Ahnfrau', 'Kreatur - Mensch, Kleriker'),
            (2, 'u-002', 'German', 'Erwählter der Ahnfrau', 'Kreatur - Mensch, Kleriker'),
            (3, 'u-001', 'French', 'Élu de l''Ancêtre', 'Créature : humain et clerc'),
            (4, 'u-003', 'German', 'Engel der Gnade', 'Kreatur - Engel'),
            (5, 'u-004', 'Spanish', 'Persecutor de nubes aven', 'Criatura - Soldado ave');
        "#,
    ),
    (
        "retail",
        r#"
        CREATE TABLE customers (customer_id INTEGER PRIMARY KEY, name TEXT, city TEXT, segment TEXT);
        CREATE TABLE orders (
            order_id INTEGER PRIMARY KEY,
            customer_id INTEGER REFERENCES customers(customer_id),
            amount REAL,
            order_date TEXT
        );
        INSERT INTO customers VALUES
            (1, 'Ana Lima', 'Lisbon', 'consumer'),
            (2, 'Ben Cole', 'Leeds', 'corporate'),
            (3, 'Chen Wei', 'Lisbon', 'corporate'),
            (4, 'Dara Noor', 'Porto', 'consumer');
        INSERT INTO orders VALUES
            (1, 1, 120.0, '2024-01-05'), (2, 1, 80.5, '2024-02-11'),
            (3, 2, 300.0, '2024-02-20'), (4, 3, 45.0, '2023-12-30'),
            (5, 3, 55.0, '2024-03-02'), (6, 3, 100.0, '2024-03-15'),
            (7, 4, 20.0, '2024-01-19');
        "#,
    ),
];

struct Item {
    db_id: &'static str,
    question: &'static str,
    evidence: &'static str,
    sql: &'static str,
    difficulty: Difficulty,
}

const fn item(
    db_id: &'static str,
    question: &'static str,
    evidence: &'static str,
    sql: &'static str,
    difficulty: Difficulty,
) -> Item {
    Item {
        db_id,
        question,
        evidence,
        sql,
        difficulty,
    }
}

use Difficulty::{Challenging, Moderate, Simple};

const ITEMS: &[Item] = &[
    item("movie_platform", "Name the movie with the most ratings.", "",
        "SELECT T1.title FROM movies AS T1 INNER JOIN ratings AS T2 ON T1.movie_id = T2.movie_id GROUP BY T1.movie_id ORDER BY COUNT(T2.rating_id) DESC LIMIT 1", Moderate),
    item("movie_platform", "How many movies were released in 2011?", "",
        "SELECT COUNT(*) FROM movies WHERE release_year = 2011", Simple),
    item("movie_platform", "What is the average rating score of movies directed by Ada Park?", "average rating score refers to AVG(score)",
        "SELECT AVG(T2.score) FROM movies AS T1 INNER JOIN ratings AS T2 ON T1.movie_id = T2.movie_id WHERE T1.director = 'Ada Park'", Moderate),
    item("movie_platform", "List the titles of movies that have at least one rating of 4.5 or higher.", "",
        "SELECT DISTINCT T1.title FROM movies AS T1 INNER JOIN ratings AS T2 ON T1.movie_id = T2.movie_id WHERE T2.score >= 4.5", Simple),
    item("movie_platform", "Which director has the highest number of movies?", "",
        "SELECT director FROM movies GROUP BY director ORDER BY COUNT(*) DESC, director LIMIT 1", Simple),
    item("california_schools", "What is the highest eligible free rate for K-12 students in the schools in Alameda County?",
        "Eligible free rate for K-12 = `Free Meal Count (K-12)` / `Enrollment (K-12)`",
        "SELECT MAX(\"Free Meal Count (K-12)\" / \"Enrollment (K-12)\") FROM frpm WHERE \"County Name\" = 'Alameda'", Simple),
    item("california_schools", "How many charter schools are in Fresno County?", "charter school refers to Charter = 1",
        "SELECT COUNT(*) FROM schools WHERE County = 'Fresno' AND Charter = 1", Simple),
    item("california_schools", "Which school has the largest K-12 enrollment?", "",
        "SELECT \"School Name\" FROM frpm ORDER BY \"Enrollment (K-12)\" DESC LIMIT 1", Simple),
    item("california_schools", "What is the total free meal count of non-charter schools in Alameda?", "non-charter refers to Charter = 0",
        "SELECT SUM(T2.\"Free Meal Count (K-12)\") FROM schools AS T1 INNER JOIN frpm AS T2 ON T1.CDSCode = T2.CDSCode WHERE T1.County = 'Alameda' AND T1.Charter = 0", Moderate),
    item("california_schools", "List the names of schools whose eligible free rate exceeds 0.6.",
        "eligible free rate = `Free Meal Count (K-12)` / `Enrollment (K-12)`",
        "SELECT \"School Name\" FROM frpm WHERE \"Free Meal Count (K-12)\" / \"Enrollment (K-12)\" > 0.6", Moderate),
    item("superhero", "Among the superheroes with the race of god/eternal, how many of them are male",
        "race \"god/eternal\" refers to race_id = 21; male refers to gender.id = 1",
        "SELECT COUNT(*) FROM superhero AS T1 INNER JOIN race AS T2 ON T1.race_id = T2.id INNER JOIN gender AS T3 ON T3.id = T1.gender_id WHERE T1.race_id = 21 AND T1.gender_id = 1", Moderate),
    item("superhero", "What is the name of the tallest superhero?", "tallest refers to MAX(height_cm)",
        "SELECT superhero_name FROM superhero ORDER BY height_cm DESC LIMIT 1", Simple),
    item("superhero", "How many female superheroes are there?", "female refers to gender = 'Female'",
        "SELECT COUNT(*) FROM superhero AS T1 INNER JOIN gender AS T2 ON T1.gender_id = T2.id WHERE T2.gender = 'Female'", Simple),
    item("superhero", "List the races that have more than one superhero.", "",
        "SELECT T2.race FROM superhero AS T1 INNER JOIN race AS T2 ON T1.race_id = T2.id GROUP BY T2.race HAVING COUNT(*) > 1", Moderate),
    item("superhero", "What is the average height of mutant superheroes?", "mutant refers to race = 'Mutant'",
        "SELECT AVG(T1.height_cm) FROM superhero AS T1 INNER JOIN race AS T2 ON T1.race_id = T2.id WHERE T2.race = 'Mutant'", Simple),
    item("card_games", "What's the German type of the card \"Ancestor's Chosen\"?",
        "German refers to language = 'German'; \"Ancestor's Chosen\" refers to name = 'Ancestor''s Chosen'",
        "SELECT DISTINCT T1.type FROM cards AS T1 INNER JOIN foreign_data AS T2 ON T2.uuid = T1.uuid WHERE T1.name = 'Ancestor''s Chosen' AND T2.language = 'German'", Moderate),
    item("card_games", "How many cards are of uncommon rarity?", "",
        "SELECT COUNT(*) FROM cards WHERE rarity = 'uncommon'", Simple),
    item("card_games", "List the German names of cards in set 10E.", "German refers to language = 'German'",
        "SELECT T2.name FROM cards AS T1 INNER JOIN foreign_data AS T2 ON T1.uuid = T2.uuid WHERE T1.setCode = '10E' AND T2.language = 'German'", Moderate),
    item("card_games", "Which languages have a translation of Angel of Mercy?", "",
        "SELECT T2.language FROM cards AS T1 INNER JOIN foreign_data AS T2 ON T1.uuid = T2.uuid WHERE T1.name = 'Angel of Mercy'", Simple),
    item("card_games", "How many distinct card names have no foreign translation?", "",
        "SELECT COUNT(DISTINCT name) FROM cards WHERE uuid NOT IN (SELECT uuid FROM foreign_data)", Challenging),
    item("retail", "What is the total order amount of customers in Lisbon?", "",
        "SELECT SUM(T2.amount) FROM customers AS T1 INNER JOIN orders AS T2 ON T1.customer_id = T2.customer_id WHERE T1.city = 'Lisbon'", Simple),
    item("retail", "Which customer placed the most orders?", "",
        "SELECT T1.name FROM customers AS T1 INNER JOIN orders AS T2 ON T1.customer_id = T2.customer_id GROUP BY T1.customer_id ORDER BY COUNT(*) DESC LIMIT 1", Moderate),
    item("retail", "How many orders were placed in February 2024?", "February 2024 refers to order_date LIKE '2024-02%'",
        "SELECT COUNT(*) FROM orders WHERE order_date LIKE '2024-02%'", Simple),
    item("retail", "List the cities of corporate customers.", "corporate refers to segment = 'corporate'",
        "SELECT DISTINCT city FROM customers WHERE segment = 'corporate'", Simple),
    item("retail", "For each segment, what is the average order amount? List segment and average.", "",
        "SELECT T1.segment, AVG(T2.amount) FROM customers AS T1 INNER JOIN orders AS T2 ON T1.customer_id = T2.customer_id GROUP BY T1.segment", Challenging),
];

#[derive(Debug, Clone)]
pub struct FixtureBenchmark {
    pub root: PathBuf,
    pub db_root: PathBuf,
    pub split_path: PathBuf,
    pub datapoints: Vec<Datapoint>,
}

impl FixtureBenchmark {
    pub fn db_path(&self, db_id: &str) -> PathBuf {
        self.db_root.join(db_id).join(format!("{db_id}.sqlite"))
    }
}

fn sql_err(e: rusqlite::Error) -> io::Error {
    io::Error::other(e)
}

/// Writes one database per fixture id under `db_root`.
pub fn write_databases(db_root: &Path) -> io::Result<()> {
    for (id, ddl) in DATABASES {
        let dir = db_root.join(id);
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{id}.sqlite"));
        if path.exists() {
            std::fs::remove_file(&path)?;
        }
        let conn = Connection::open(&path).map_err(sql_err)?;
        conn.execute_batch(ddl).map_err(sql_err)?;
    }
    Ok(())
}

pub fn datapoints() -> Vec<Datapoint> {
    ITEMS
        .iter()
        .enumerate()
        .map(|(i, it)| Datapoint {
            question_id: i as i64,
            db_id: it.db_id.to_string(),
            question: it.question.to_string(),
            evidence: it.evidence.to_string(),
            gold_sql: it.sql.to_string(),
            difficulty: Some(it.difficulty),
        })
        .collect()
}

/// Builds `<dir>/databases/...` and `<dir>/dev.json`.
pub fn build_benchmark(dir: &Path) -> io::Result<FixtureBenchmark> {
    let db_root = dir.join("databases");
    write_databases(&db_root)?;
    let dps = datapoints();
    let split_path = dir.join("dev.json");
    std::fs::write(&split_path, serde_json::to_vec_pretty(&dps)?)?;
    Ok(FixtureBenchmark {
        root: dir.to_path_buf(),
        db_root,
        split_path,
        datapoints: dps,
    })
}

/// Wraps SQL the way a model would answer.
pub fn as_trace(sql: &str) -> String {
    format!("Working through the schema, the query below answers the question.\n\n{}\n", fence(sql))
}

/// A textually different query with the same result set as `gold`.
pub fn equivalent_sql(gold: &str) -> String {
    format!("SELECT * FROM ({gold})")
}

/// Seven-candidate layout. With a correct majority the gold-equivalent
/// cluster is {1, 3, 5, 6}; otherwise the wrong cluster is {1, 2, 4, 6}.
pub fn candidate_texts(gold: &str, majority_correct: bool) -> Vec<String> {
    let right = as_trace(&equivalent_sql(gold));
    let gold_t = as_trace(gold);
    let wrong = as_trace(WRONG_SQL);
    let broken = as_trace("SELEC COUNT(* FROM");
    let no_sql = "I am not sure which table holds this information.".to_string();
    if majority_correct {
        vec![wrong.clone(), right.clone(), broken, gold_t.clone(), wrong, right, gold_t]
    } else {
        vec![gold_t.clone(), wrong.clone(), wrong.clone(), no_sql, wrong.clone(), gold_t, wrong]
    }
}

/// Stub script keyed by the digest of each datapoint's default prompt.
/// Datapoints whose index satisfies `wrong_majority` get a wrong plurality.
/// Returns the script and how many datapoints have a correct plurality.
pub fn stub_script(
    bench: &FixtureBenchmark,
    wrong_majority: impl Fn(usize) -> bool,
) -> io::Result<(HashMap<String, Vec<String>>, usize)> {
    let tpl = PromptTemplate::default();
    let mut script = HashMap::new();
    let mut correct = 0;
    for (i, dp) in bench.datapoints.iter().enumerate() {
        let schema = describe_schema_path(&bench.db_path(&dp.db_id), DEFAULT_SAMPLE_ROWS).map_err(io::Error::other)?;
        let prompt = render_prompt(dp, &schema, &tpl).map_err(io::Error::other)?;
        let ok = !wrong_majority(i);
        if ok {
            correct += 1;
        }
        script.insert(prompt_digest(&prompt), candidate_texts(&dp.gold_sql, ok));
    }
    Ok((script, correct))
}
