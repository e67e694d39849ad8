pub(super) const DDL: &str = r#"
PRAGMA foreign_keys = ON;

CREATE TABLE IF NOT EXISTS Procedures (
    ProcedureID TEXT PRIMARY KEY,
    Name TEXT NOT NULL,
    BasePath TEXT NOT NULL,
    SourcePath TEXT NOT NULL,
    Description TEXT NOT NULL DEFAULT '',
    Tags TEXT NOT NULL DEFAULT '[]',
    Schema TEXT NOT NULL,
    Head TEXT NOT NULL,
    CreatedAt TIMESTAMP NOT NULL
);

CREATE TABLE IF NOT EXISTS Versions (
    ProcedureID TEXT NOT NULL REFERENCES Procedures(ProcedureID),
    VersionID TEXT NOT NULL,
    Seq INTEGER NOT NULL,
    ParentVersion TEXT,
    PatchID TEXT,
    Checkpoint INTEGER NOT NULL,
    Message TEXT,
    CreatedAt TIMESTAMP NOT NULL,
    PRIMARY KEY (ProcedureID, VersionID),
    UNIQUE (ProcedureID, Seq)
);

CREATE TABLE IF NOT EXISTS Schemas (
    SchemaID TEXT PRIMARY KEY
);

CREATE TABLE IF NOT EXISTS SchemaGeneralizations (
    Specific TEXT NOT NULL REFERENCES Schemas(SchemaID),
    General TEXT NOT NULL REFERENCES Schemas(SchemaID),
    PRIMARY KEY (Specific, General)
);

CREATE TABLE IF NOT EXISTS Lenses (
    LensID TEXT PRIMARY KEY,
    Type TEXT NOT NULL CHECK (Type IN ('Extraction', 'Abstraction', 'Transformation', 'Temporal')),
    Description TEXT NOT NULL DEFAULT '',
    SourceSchema TEXT NOT NULL REFERENCES Schemas(SchemaID),
    TargetSchema TEXT NOT NULL REFERENCES Schemas(SchemaID),
    PatchTemplate TEXT NOT NULL,
    InversePatchTemplate TEXT NOT NULL,
    ParametersSchema TEXT NOT NULL DEFAULT '{}',
    Definition TEXT NOT NULL,
    Path TEXT NOT NULL
);

CREATE TABLE IF NOT EXISTS Views (
    ViewID TEXT PRIMARY KEY,
    ProcedureID TEXT NOT NULL REFERENCES Procedures(ProcedureID),
    LensID TEXT NOT NULL,
    Parameters TEXT NOT NULL,
    Path TEXT NOT NULL,
    CreatedAt TIMESTAMP NOT NULL,
    LensChain TEXT NOT NULL,
    ParamsHash TEXT NOT NULL,
    ComplementRef TEXT,
    SourceVersion TEXT NOT NULL
);

CREATE TABLE IF NOT EXISTS Compositions (
    CompositionID TEXT PRIMARY KEY,
    Name TEXT NOT NULL UNIQUE,
    LensSequence TEXT NOT NULL,
    ValidationRules TEXT NOT NULL,
    CreatedAt TIMESTAMP NOT NULL
);

CREATE TABLE IF NOT EXISTS Units (
    UnitID TEXT NOT NULL,
    ProcedureID TEXT NOT NULL REFERENCES Procedures(ProcedureID),
    Content TEXT NOT NULL,
    StartLine INT NOT NULL,
    EndLine INT NOT NULL,
    SemanticTag TEXT,
    LamportClock INT NOT NULL,
    Agent TEXT NOT NULL,
    Tags TEXT NOT NULL DEFAULT '[]',
    FilePath TEXT NOT NULL,
    CellID TEXT NOT NULL,
    Kind TEXT NOT NULL,
    DocOrder INT NOT NULL,
    PRIMARY KEY (ProcedureID, UnitID),
    CHECK (StartLine <= EndLine)
);

CREATE INDEX IF NOT EXISTS UnitsByRank ON Units (ProcedureID, LamportClock, Agent, DocOrder);

CREATE TABLE IF NOT EXISTS Dependencies (
    ProcedureID TEXT NOT NULL REFERENCES Procedures(ProcedureID),
    FromUnit TEXT NOT NULL,
    ToUnit TEXT NOT NULL,
    Variable TEXT NOT NULL,
    PRIMARY KEY (ProcedureID, FromUnit, ToUnit, Variable)
);
"#;
