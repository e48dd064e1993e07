# The joint over (x, z, a, y) splits into an attribute-conditioned latent EBM
# term and an attribute predictor.  Checked on explicit probability tables.
from fineosr.factorization import ToyJointTable, check_factorization
from fineosr.numkit import Rng

for i in range(3):
    print(check_factorization(ToyJointTable.random_factored(Rng(i))))
print(check_factorization(ToyJointTable.uniform()))
print(check_factorization(ToyJointTable.negative_control()))
