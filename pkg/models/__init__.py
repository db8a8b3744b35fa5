"""Config schemas, cameras and the two scene representations."""
