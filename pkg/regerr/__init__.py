"""Dense registration-error estimation for MRI/iUS volume pairs."""
