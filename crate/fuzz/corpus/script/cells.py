# %% [markdown]
# Setup
# %%
import pandas as pd

def load(p):
    return pd.read_csv(p)

# %%
df = load("a.csv")
