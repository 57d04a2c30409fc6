//! Bundled assets: the baseline agent, the default evolution strategy and a
//! small three-database dataset for desk-scale runs.

use std::fs;
use std::path::Path;

use rusqlite::Connection;
use serde_json::json;

use crate::error::{IoContext, Result};
use crate::evolution::{render_file_blocks, Draft, ScriptedEvolutionFixture};
use crate::generation::{ScriptedFixture, ACCEPT_TOKEN};
use crate::registry::{load_package, AgentPackage, INSTRUCTIONS_FILE, MANIFEST_FILE, TOOLS_DIR};
use crate::scheduler::{database_file, QuestionPool};

pub const BASELINE_MANIFEST: &str = include_str!("../assets/baseline/agent.md");
pub const BASELINE_INSTRUCTIONS: &str = include_str!("../assets/baseline/eval_instructions.md");
pub const BASELINE_TOOL: &str = include_str!("../assets/baseline/tools/extract_schema.py");
pub const CROSS_POLLINATION_STRATEGY: &str =
    include_str!("../assets/strategies/cross_pollination.md");
pub const PROFILER_MANIFEST: &str = include_str!("../assets/profiler/agent.md");
pub const PROFILER_INSTRUCTIONS: &str = include_str!("../assets/profiler/eval_instructions.md");
pub const PROFILER_REFINED_INSTRUCTIONS: &str = include_str!("../assets/profiler/refined_instructions.md");
pub const PROFILER_TOOL: &str = include_str!("../assets/profiler/tools/profile.py");

/// Writes the raw-DDL baseline agent into `dir` and loads it.
pub fn write_baseline_package(dir: &Path) -> Result<AgentPackage> {
    let tools = dir.join(TOOLS_DIR);
    fs::create_dir_all(&tools).at(&tools)?;
    fs::write(dir.join(MANIFEST_FILE), BASELINE_MANIFEST).at(dir.join(MANIFEST_FILE))?;
    fs::write(dir.join(INSTRUCTIONS_FILE), BASELINE_INSTRUCTIONS)
        .at(dir.join(INSTRUCTIONS_FILE))?;
    let tool = tools.join("extract_schema.py");
    fs::write(&tool, BASELINE_TOOL).at(&tool)?;
    load_package(dir)
}

fn profiler_draft(instructions: &str, reasoning: &str) -> String {
    let files = [
        (MANIFEST_FILE, PROFILER_MANIFEST),
        (INSTRUCTIONS_FILE, instructions),
        ("tools/profile.py", PROFILER_TOOL),
    ];
    render_file_blocks(&Draft {
        files: files.iter().map(|(p, t)| (p.to_string(), t.to_string())).collect(),
        reasoning: reasoning.to_string(),
    })
}

/// Evolution script that proposes a profiling agent and refines its
/// instructions once.
pub fn toy_evolution_fixture() -> ScriptedEvolutionFixture {
    ScriptedEvolutionFixture {
        propose: vec![profiler_draft(
            PROFILER_INSTRUCTIONS,
            "Raw DDL hides value formats and categorical spellings, which the \
             report shows as wrong-result failures. The profile adds samples, \
             NULL counts and join hints.",
        )],
        refine: vec![profiler_draft(
            PROFILER_REFINED_INSTRUCTIONS,
            "Added rules for duplicate rows from joins and for unmatched rows.",
        )],
    }
}

/// Generation script over a question pool. Questions cycle through five
/// shapes by id: accepted first draft, revised empty draft, failing draft
/// rescued by the retry, and accepted wrong answer (twice as often).
pub fn toy_generation_fixture(pool: &QuestionPool) -> ScriptedFixture {
    let mut fixture = ScriptedFixture::default();
    for q in pool.questions.values().flatten() {
        let gold = q.gold_sql.trim().trim_end_matches(';').to_string();
        let replies = match q.question_id % 5 {
            0 => vec![gold, ACCEPT_TOKEN.into()],
            1 => vec![format!("SELECT * FROM ({gold}) LIMIT 0"), gold, ACCEPT_TOKEN.into()],
            2 => vec!["SELECT missing_column FROM sqlite_master".into(), ACCEPT_TOKEN.into(), gold],
            _ => vec![format!("SELECT 'wrong' AS answer, {}", q.question_id), ACCEPT_TOKEN.into()],
        };
        fixture.by_question.insert(q.question.trim().to_string(), replies);
    }
    fixture
}

struct ToyDatabase {
    id: &'static str,
    schema: &'static str,
    rows: fn(&Connection) -> rusqlite::Result<()>,
    /// (question, evidence, gold SQL, difficulty)
    questions: &'static [(&'static str, &'static str, &'static str, &'static str)],
}

const LIBRARY_SCHEMA: &str = "
CREATE TABLE authors (
    author_id INTEGER PRIMARY KEY,
    name TEXT NOT NULL,
    country TEXT,
    birth_year INTEGER
);
CREATE TABLE books (
    book_id INTEGER PRIMARY KEY,
    title TEXT NOT NULL,
    author_id INTEGER REFERENCES authors(author_id),
    genre TEXT,
    published TEXT,
    price TEXT,
    pages INTEGER
);
CREATE INDEX idx_books_author ON books(author_id);
CREATE TABLE loans (
    loan_id INTEGER PRIMARY KEY,
    book_id INTEGER REFERENCES books(book_id),
    borrower TEXT,
    loan_date TEXT,
    returned INTEGER
);
";

fn library_rows(c: &Connection) -> rusqlite::Result<()> {
    let authors = [
        (1, "Ada Okafor", "Nigeria", 1961),
        (2, "Hiro Tanaka", "Japan", 1975),
        (3, "Mary Lowell", "UK", 1948),
        (4, "Sam Ortiz", "USA", 1983),
        (5, "Yuki Mori", "Japan", 1990),
        (6, "Lena Brandt", "Germany", 1969),
    ];
    for a in authors {
        c.execute("INSERT INTO authors VALUES (?1, ?2, ?3, ?4)", rusqlite::params![a.0, a.1, a.2, a.3])?;
    }
    let books: [(i64, &str, Option<i64>, &str, &str, &str, i64); 12] = [
        (1, "River of Salt", Some(1), "Fiction", "2015-03-12", "$12.99", 320),
        (2, "The Quiet Ledger", Some(3), "Mystery", "2019-07-01", "$9.50", 280),
        (3, "Cells and Signals", Some(4), "Science", "2019-11-20", "$24.00", 410),
        (4, "Harbor Lights", Some(2), "Fiction", "2012-05-05", "$11.25", 250),
        (5, "Stone Calendar", Some(3), "History", "2008-09-14", "$18.75", 512),
        (6, "Night Train to Osaka", Some(2), "Mystery", "2021-01-30", "$13.40", 300),
        (7, "Orbital Mechanics Made Plain", Some(4), "Science", "2017-02-18", "$29.99", 388),
        (8, "The Ninth Clue", Some(5), "Mystery", "2019-04-09", "$8.99", 224),
        (9, "Empires of Grain", Some(1), "History", "2011-10-02", "$21.00", 640),
        (10, "Snowfall Letters", Some(5), "Fiction", "2020-12-24", "$10.00", 198),
        (11, "Tidal Chemistry", Some(4), "Science", "2022-06-15", "$27.50", 356),
        (12, "Anonymous Verses", None, "Fiction", "1999-01-01", "$5.00", 96),
    ];
    for b in books {
        c.execute(
            "INSERT INTO books VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
            rusqlite::params![b.0, b.1, b.2, b.3, b.4, b.5, b.6],
        )?;
    }
    let borrowers = ["kim", "lee", "patel", "kim", "novak", "kim", "lee", "garcia"];
    for i in 0..15i64 {
        let book = if i == 14 { 99 } else { 1 + (i * 5) % 12 };
        c.execute(
            "INSERT INTO loans VALUES (?1, ?2, ?3, ?4, ?5)",
            rusqlite::params![
                i + 1,
                book,
                borrowers[(i as usize) % borrowers.len()],
                format!("2023-{:02}-{:02}", 1 + i % 12, 1 + (i * 3) % 28),
                i64::from(i % 3 != 0)
            ],
        )?;
    }
    Ok(())
}

const LIBRARY_QUESTIONS: &[(&str, &str, &str, &str)] = &[
    ("How many books are in the Mystery genre?", "", "SELECT COUNT(*) FROM books WHERE genre = 'Mystery'", "simple"),
    ("List the titles of books written by authors from Japan.", "", "SELECT b.title FROM books b JOIN authors a ON b.author_id = a.author_id WHERE a.country = 'Japan'", "moderate"),
    ("Which author was born earliest?", "", "SELECT name FROM authors ORDER BY birth_year ASC LIMIT 1", "simple"),
    ("How many loans have not been returned?", "not returned refers to returned = 0", "SELECT COUNT(*) FROM loans WHERE returned = 0", "simple"),
    ("What is the title of the longest book?", "longest refers to MAX(pages)", "SELECT title FROM books ORDER BY pages DESC LIMIT 1", "simple"),
    ("How many books were published in 2019?", "published in 2019 refers to published LIKE '2019%'", "SELECT COUNT(*) FROM books WHERE published LIKE '2019%'", "simple"),
    ("Who has borrowed books most often?", "", "SELECT borrower FROM loans GROUP BY borrower ORDER BY COUNT(*) DESC LIMIT 1", "moderate"),
    ("What is the average number of pages of Science books?", "", "SELECT AVG(pages) FROM books WHERE genre = 'Science'", "simple"),
    ("Which authors have no books in the catalogue?", "", "SELECT name FROM authors WHERE author_id NOT IN (SELECT author_id FROM books WHERE author_id IS NOT NULL)", "moderate"),
    ("How many loans refer to a book missing from the catalogue?", "", "SELECT COUNT(*) FROM loans WHERE book_id NOT IN (SELECT book_id FROM books)", "challenging"),
];

const SCHOOL_SCHEMA: &str = "
CREATE TABLE departments (
    dept_id INTEGER PRIMARY KEY,
    name TEXT NOT NULL,
    parent_id INTEGER REFERENCES departments(dept_id),
    budget_usd REAL
);
CREATE TABLE students (
    student_id INTEGER PRIMARY KEY,
    name TEXT,
    dept_id INTEGER REFERENCES departments(dept_id),
    enroll_date TEXT,
    gpa REAL,
    status TEXT
);
CREATE TABLE courses (
    code TEXT PRIMARY KEY,
    title TEXT,
    dept_id INTEGER REFERENCES departments(dept_id),
    credits INTEGER
);
CREATE TABLE enrollments (
    student_id INTEGER REFERENCES students(student_id),
    code TEXT REFERENCES courses(code),
    grade TEXT,
    PRIMARY KEY (student_id, code)
);
";

fn school_rows(c: &Connection) -> rusqlite::Result<()> {
    let depts: [(i64, &str, Option<i64>, f64); 6] = [
        (1, "Sciences", None, 900000.0),
        (2, "Computer Science", Some(1), 420000.0),
        (3, "Mathematics", Some(1), 310000.0),
        (4, "Humanities", None, 500000.0),
        (5, "History", Some(4), 150000.0),
        (6, "Physics", Some(1), 280000.0),
    ];
    for d in depts {
        c.execute("INSERT INTO departments VALUES (?1, ?2, ?3, ?4)", rusqlite::params![d.0, d.1, d.2, d.3])?;
    }
    let names = [
        "Avery", "Blake", "Casey", "Devon", "Emery", "Finley", "Gray", "Harper", "Indy", "Jules",
        "Kai", "Logan", "Morgan", "Noel", "Oakley", "Parker",
    ];
    let statuses = ["Active", "Active", "Graduated", "On Leave"];
    for (i, n) in names.iter().enumerate() {
        let i = i as i64;
        let dept = if i == 15 { None } else { Some(2 + i % 5) };
        c.execute(
            "INSERT INTO students VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            rusqlite::params![
                i + 1,
                n,
                dept,
                format!("{}-09-{:02}", 2018 + i % 5, 1 + i % 20),
                2.0 + ((i * 7) % 20) as f64 / 10.0,
                statuses[(i as usize) % statuses.len()]
            ],
        )?;
    }
    let courses = [
        ("CS101", "Intro to Programming", 2, 4),
        ("CS201", "Data Structures", 2, 4),
        ("MA101", "Calculus I", 3, 3),
        ("MA201", "Linear Algebra", 3, 3),
        ("HI110", "World History", 5, 3),
        ("PH101", "Mechanics", 6, 4),
    ];
    for co in courses {
        c.execute("INSERT INTO courses VALUES (?1, ?2, ?3, ?4)", rusqlite::params![co.0, co.1, co.2, co.3])?;
    }
    let grades = ["A", "B", "C", "A", "B"];
    for s in 1..=16i64 {
        for (k, co) in courses.iter().enumerate() {
            if (s + k as i64) % 3 == 0 {
                c.execute(
                    "INSERT INTO enrollments VALUES (?1, ?2, ?3)",
                    rusqlite::params![s, co.0, grades[((s as usize) + k) % grades.len()]],
                )?;
            }
        }
    }
    Ok(())
}

const SCHOOL_QUESTIONS: &[(&str, &str, &str, &str)] = &[
    ("How many students are currently active?", "currently active refers to status = 'Active'", "SELECT COUNT(*) FROM students WHERE status = 'Active'", "simple"),
    ("Which departments belong to the Sciences department?", "", "SELECT d.name FROM departments d JOIN departments p ON d.parent_id = p.dept_id WHERE p.name = 'Sciences'", "moderate"),
    ("What is the highest GPA among students?", "", "SELECT MAX(gpa) FROM students", "simple"),
    ("List the course codes worth 4 credits.", "", "SELECT code FROM courses WHERE credits = 4", "simple"),
    ("How many students enrolled in 2020?", "enrolled in 2020 refers to enroll_date LIKE '2020%'", "SELECT COUNT(*) FROM students WHERE enroll_date LIKE '2020%'", "simple"),
    ("Which students are not assigned to any department?", "", "SELECT name FROM students WHERE dept_id IS NULL", "simple"),
    ("How many students received an A in CS101?", "", "SELECT COUNT(*) FROM enrollments WHERE code = 'CS101' AND grade = 'A'", "simple"),
    ("What is the total budget of top-level departments?", "top-level refers to parent_id IS NULL", "SELECT SUM(budget_usd) FROM departments WHERE parent_id IS NULL", "moderate"),
    ("List the names of students enrolled in Linear Algebra.", "", "SELECT s.name FROM students s JOIN enrollments e ON s.student_id = e.student_id JOIN courses c ON e.code = c.code WHERE c.title = 'Linear Algebra'", "moderate"),
    ("What percentage of students have graduated?", "percentage = COUNT(status = 'Graduated') * 100.0 / COUNT(*)", "SELECT CAST(SUM(status = 'Graduated') AS REAL) * 100 / COUNT(*) FROM students", "challenging"),
];

const SHOP_SCHEMA: &str = "
CREATE TABLE customers (
    customer_id INTEGER PRIMARY KEY,
    name TEXT,
    segment TEXT,
    country TEXT
);
CREATE TABLE products (
    product_id INTEGER PRIMARY KEY,
    name TEXT,
    category TEXT,
    unit_price REAL,
    \"Weight (kg)\" REAL
);
CREATE TABLE orders (
    order_id INTEGER PRIMARY KEY,
    customer_id INTEGER REFERENCES customers(customer_id),
    order_date TEXT,
    status TEXT
);
CREATE TABLE order_items (
    order_id INTEGER REFERENCES orders(order_id),
    product_id INTEGER REFERENCES products(product_id),
    quantity INTEGER
);
";

fn shop_rows(c: &Connection) -> rusqlite::Result<()> {
    let segments = ["SME", "LAM", "KAM"];
    let countries = ["CZE", "SVK", "CZE", "DEU"];
    for i in 0..10i64 {
        c.execute(
            "INSERT INTO customers VALUES (?1, ?2, ?3, ?4)",
            rusqlite::params![
                i + 1,
                format!("Customer {}", i + 1),
                segments[(i as usize) % 3],
                countries[(i as usize) % 4]
            ],
        )?;
    }
    let products: [(i64, &str, &str, f64, f64); 8] = [
        (1, "Desk Lamp", "Lighting", 24.5, 1.2),
        (2, "Floor Lamp", "Lighting", 79.0, 6.5),
        (3, "Office Chair", "Furniture", 149.99, 14.0),
        (4, "Standing Desk", "Furniture", 399.0, 32.5),
        (5, "Monitor Arm", "Accessories", 59.9, 3.1),
        (6, "Cable Tray", "Accessories", 19.0, 0.8),
        (7, "Bookshelf", "Furniture", 120.0, 21.0),
        (8, "LED Strip", "Lighting", 15.75, 0.3),
    ];
    for p in products {
        c.execute("INSERT INTO products VALUES (?1, ?2, ?3, ?4, ?5)", rusqlite::params![p.0, p.1, p.2, p.3, p.4])?;
    }
    let statuses = ["shipped", "shipped", "pending", "cancelled"];
    for i in 0..20i64 {
        c.execute(
            "INSERT INTO orders VALUES (?1, ?2, ?3, ?4)",
            rusqlite::params![
                i + 1,
                1 + (i * 3) % 10,
                format!("2024-{:02}-{:02}", 1 + i % 6, 1 + (i * 5) % 28),
                statuses[(i as usize) % 4]
            ],
        )?;
        for k in 0..(1 + i % 3) {
            c.execute(
                "INSERT INTO order_items VALUES (?1, ?2, ?3)",
                rusqlite::params![i + 1, 1 + (i + k * 3) % 8, 1 + (i + k) % 4],
            )?;
        }
    }
    Ok(())
}

const SHOP_QUESTIONS: &[(&str, &str, &str, &str)] = &[
    ("How many customers are in the SME segment?", "", "SELECT COUNT(*) FROM customers WHERE segment = 'SME'", "simple"),
    ("What is the most expensive product?", "", "SELECT name FROM products ORDER BY unit_price DESC LIMIT 1", "simple"),
    ("How many orders were cancelled?", "", "SELECT COUNT(*) FROM orders WHERE status = 'cancelled'", "simple"),
    ("List the names of products in the Lighting category.", "", "SELECT name FROM products WHERE category = 'Lighting'", "simple"),
    ("How many orders were placed in March 2024?", "March 2024 refers to order_date LIKE '2024-03%'", "SELECT COUNT(*) FROM orders WHERE order_date LIKE '2024-03%'", "simple"),
    ("What is the total quantity of Standing Desks ordered?", "", "SELECT SUM(oi.quantity) FROM order_items oi JOIN products p ON oi.product_id = p.product_id WHERE p.name = 'Standing Desk'", "moderate"),
    ("Which customers from CZE have placed an order?", "", "SELECT DISTINCT c.name FROM customers c JOIN orders o ON c.customer_id = o.customer_id WHERE c.country = 'CZE'", "moderate"),
    ("What is the average weight in kg of furniture products?", "", "SELECT AVG(\"Weight (kg)\") FROM products WHERE category = 'Furniture'", "moderate"),
    ("What is the total revenue of shipped orders?", "revenue = SUM(quantity * unit_price)", "SELECT SUM(oi.quantity * p.unit_price) FROM order_items oi JOIN products p ON oi.product_id = p.product_id JOIN orders o ON oi.order_id = o.order_id WHERE o.status = 'shipped'", "challenging"),
    ("Which customer placed the most orders?", "", "SELECT c.name FROM customers c JOIN orders o ON c.customer_id = o.customer_id GROUP BY c.customer_id ORDER BY COUNT(*) DESC, c.customer_id LIMIT 1", "moderate"),
];

const TOY_DATABASES: [ToyDatabase; 3] = [
    ToyDatabase {
        id: "library",
        schema: LIBRARY_SCHEMA,
        rows: library_rows,
        questions: LIBRARY_QUESTIONS,
    },
    ToyDatabase {
        id: "school",
        schema: SCHOOL_SCHEMA,
        rows: school_rows,
        questions: SCHOOL_QUESTIONS,
    },
    ToyDatabase {
        id: "shop",
        schema: SHOP_SCHEMA,
        rows: shop_rows,
        questions: SHOP_QUESTIONS,
    },
];

/// Writes the three-database toy dataset (`questions.json` plus
/// `<db_id>/<db_id>.sqlite`) under `root`.
pub fn write_toy_dataset(root: &Path) -> Result<()> {
    let mut questions = Vec::new();
    for db in &TOY_DATABASES {
        let dir = root.join(db.id);
        fs::create_dir_all(&dir).at(&dir)?;
        let path = database_file(root, db.id);
        if path.exists() {
            fs::remove_file(&path).at(&path)?;
        }
        let mut conn = Connection::open(&path)?;
        // The fixtures deliberately contain dangling references.
        conn.execute_batch("PRAGMA foreign_keys = OFF;")?;
        let tx = conn.transaction()?;
        tx.execute_batch(db.schema)?;
        (db.rows)(&tx)?;
        tx.commit()?;
        for (question, evidence, sql, difficulty) in db.questions {
            questions.push(json!({
                "question_id": questions.len(),
                "db_id": db.id,
                "question": question,
                "evidence": evidence,
                "SQL": sql,
                "difficulty": difficulty,
            }));
        }
    }
    let path = root.join("questions.json");
    fs::write(&path, serde_json::to_string_pretty(&questions)?).at(&path)?;
    Ok(())
}

/// A database with `tables` tables of `columns_per_table` columns each and a
/// few rows per table, for exercising the larger size tiers.
pub fn write_wide_database(path: &Path, tables: usize, columns_per_table: usize) -> Result<()> {
    if path.exists() {
        fs::remove_file(path).at(path)?;
    }
    let mut conn = Connection::open(path)?;
    let tx = conn.transaction()?;
    for t in 0..tables {
        let cols: Vec<String> = (0..columns_per_table)
            .map(|c| match c % 3 {
                0 => format!("c{c:03}_id INTEGER"),
                1 => format!("c{c:03}_label TEXT"),
                _ => format!("c{c:03}_amount REAL"),
            })
            .collect();
        tx.execute_batch(&format!("CREATE TABLE wide_{t:02} ({});", cols.join(", ")))?;
        for r in 0..8 {
            let values: Vec<String> = (0..columns_per_table)
                .map(|c| match c % 3 {
                    0 => (r * 10 + c as i64).to_string(),
                    1 => format!("'{}'", ["North", "South", "East", "West"][(r as usize + c) % 4]),
                    _ => format!("{}.5", r + c as i64),
                })
                .collect();
            tx.execute_batch(&format!("INSERT INTO wide_{t:02} VALUES ({});", values.join(", ")))?;
        }
    }
    tx.commit()?;
    Ok(())
}
