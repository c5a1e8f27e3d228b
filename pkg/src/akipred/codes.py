"""Event codes shared by the phenotyper, featurizer and synthetic generator."""

SCR = "creatinine"
BUN = "bun"

VITALS = ("map", "temperature", "resp_rate", "heart_rate")

# Dynamic 12-hour lab means: basic metabolic panel, complete blood count, albumin, total bilirubin.
DYNAMIC_LABS = (
    "sodium", "potassium", "co2", "chloride", "glucose", "calcium", BUN,
    "wbc", "hemoglobin", "hematocrit", "platelets", "mpv", "mcv", "rdw",
    "albumin", "bilirubin_total",
)
PANEL_COUNT_LABS = ("glucose", "hemoglobin", "albumin")

# Labs summarised over the year before admission.
HISTORY_LABS = (
    "hemoglobin", "wbc", "hematocrit", "mcv", "rdw", "platelets", "glucose", BUN,
    SCR, "sodium", "potassium", "chloride", "co2", "lactate", "calcium", "alt",
    "albumin", "ast", "bilirubin_direct",
)

ESKD_CODES = ("N18.6", "Z99.2", "Z49")
