from rltab.data import CONTINUOUS, Dataset, FeatureSpec


def make_dataset(columns: dict, kinds: dict, label: str) -> Dataset:
    """Build a Dataset from column lists; categorical vocabularies are the sorted observed values."""
    names = list(columns)
    schema = []
    for name in names:
        if kinds[name] == CONTINUOUS:
            schema.append(FeatureSpec(name, CONTINUOUS))
        else:
            schema.append(FeatureSpec(name, kinds[name], vocabulary=tuple(sorted(set(columns[name])))))
    n = len(columns[names[0]])
    rows = [tuple(float(columns[c][i]) if kinds[c] == CONTINUOUS else columns[c][i] for c in names)
            for i in range(n)]
    return Dataset(schema, rows, names.index(label))
