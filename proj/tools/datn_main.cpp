#include "datn/datn.hpp"
int main(){return 0;}
