import numpy as np


class Model:
    def fit(self, x):
        return x


if __name__ == "__main__":
    Model().fit(np.zeros(3))
